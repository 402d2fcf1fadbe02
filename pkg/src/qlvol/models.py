"""
Volatility model families ``Sigma(t, x, theta)``.

Every family works on batches: ``eval(t, x, theta)`` maps ``t`` of shape
``(N,)`` and ``x`` of shape ``(N, dim_x)`` to ``(N, dim, dim)`` symmetric
matrices, and ``vjp(t, x, theta, G)`` returns
``d/dtheta sum_n sum_ij G[n, i, j] Sigma[n, i, j]``.

By convention the explanatory vector is ``x = (t, y_1, ..., y_dim)``; the
parametric families read the state from its trailing coordinates.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ShapeMismatch

log = logging.getLogger(__name__)


class VolatilityModel:
    """Base class for a parametric co-volatility family."""

    dim = 1
    input_dim = 2
    n_params = 1

    def eval(self, t, x, theta):
        raise NotImplementedError

    def vjp(self, t, x, theta, G):
        raise NotImplementedError

    def jacobian(self, t, x, theta):
        """Per-point derivatives ``dSigma/dtheta`` of shape ``(N, n_params, dim, dim)``.

        Built from ``vjp`` with unit cotangents, one point at a time.
        """
        t = np.atleast_1d(t)
        x = np.atleast_2d(x)
        d = self.dim
        out = np.zeros((t.size, self.n_params, d, d))
        for n in range(t.size):
            for i in range(d):
                for j in range(d):
                    E = np.zeros((1, d, d))
                    E[0, i, j] = 1.0
                    out[n, :, i, j] = self.vjp(t[n:n + 1], x[n:n + 1], theta, E)
        return out


def _pos(x, model):
    neg = x < 0
    if np.any(neg):
        model.clip_count += int(np.sum(neg))
        log.warning("clipping %d negative state values to zero", int(np.sum(neg)))
        x = np.where(neg, 0.0, x)
    return x


class CIRModel(VolatilityModel):
    """Scalar family ``Sigma = sigma^2 * y``.

    Parameters
    ----------
    state_index : int
        Coordinate of ``x`` holding the state ``y``.
    """

    dim = 1
    n_params = 1

    def __init__(self, state_index=-1, input_dim=2):
        self.state_index = state_index
        self.input_dim = input_dim
        self.clip_count = 0

    def eval(self, t, x, theta):
        y = _pos(np.atleast_2d(x)[:, self.state_index], self)
        return (theta[0] ** 2 * y)[:, None, None]

    def vjp(self, t, x, theta, G):
        y = _pos(np.atleast_2d(x)[:, self.state_index], self)
        return np.array([np.sum(2.0 * theta[0] * y * G[:, 0, 0])])

    def jacobian(self, t, x, theta):
        y = _pos(np.atleast_2d(x)[:, self.state_index], self)
        return (2.0 * theta[0] * y)[:, None, None, None]


def seasonal_factor(t, a=1.0, b=-4.0 / 3.0, c=2.0 / 3.0):
    """Intraday seasonality ``a t^2 + b t + c``."""
    return a * np.asarray(t) ** 2 + b * np.asarray(t) + c


class SeasonalCIR2DModel(VolatilityModel):
    """Two-dimensional CIR family with known seasonality.

    ``Sigma = f(t)^2 [[s1^2 y1, s1 s3 sqrt(y1 y2)], [s1 s3 sqrt(y1 y2), (s2^2 + s3^2) y2]]``
    with ``f(t) = a t^2 + b t + c`` and ``theta = (s1, s2, s3)``.
    """

    dim = 2
    n_params = 3

    def __init__(self, a=1.0, b=-4.0 / 3.0, c=2.0 / 3.0, state_index=(-2, -1), input_dim=3):
        self.a, self.b, self.c = a, b, c
        self.state_index = tuple(state_index)
        self.input_dim = input_dim
        self.clip_count = 0

    def _parts(self, t, x):
        x = np.atleast_2d(x)
        y1 = _pos(x[:, self.state_index[0]], self)
        y2 = _pos(x[:, self.state_index[1]], self)
        f2 = seasonal_factor(np.atleast_1d(t), self.a, self.b, self.c) ** 2
        return f2, y1, y2, np.sqrt(y1 * y2)

    def eval(self, t, x, theta):
        s1, s2, s3 = theta
        f2, y1, y2, r = self._parts(t, x)
        out = np.empty((f2.size, 2, 2))
        out[:, 0, 0] = f2 * s1 ** 2 * y1
        out[:, 0, 1] = out[:, 1, 0] = f2 * s1 * s3 * r
        out[:, 1, 1] = f2 * (s2 ** 2 + s3 ** 2) * y2
        return out

    def jacobian(self, t, x, theta):
        s1, s2, s3 = theta
        f2, y1, y2, r = self._parts(t, x)
        J = np.zeros((f2.size, 3, 2, 2))
        J[:, 0, 0, 0] = 2 * s1 * f2 * y1
        J[:, 0, 0, 1] = J[:, 0, 1, 0] = s3 * f2 * r
        J[:, 1, 1, 1] = 2 * s2 * f2 * y2
        J[:, 2, 0, 1] = J[:, 2, 1, 0] = s1 * f2 * r
        J[:, 2, 1, 1] = 2 * s3 * f2 * y2
        return J

    def vjp(self, t, x, theta, G):
        return np.einsum("npij,nij->p", self.jacobian(t, x, theta), G)


class PolynomialModel(VolatilityModel):
    """Scalar family ``(b0 + sum_{j<=p} (b_j t^j + b_{j+p} y^j))^2 + eps``.

    Parameters
    ----------
    degree : int
        ``p`` in {1, 2, 3}.
    eps : float
        Floor added to keep the output positive.
    """

    dim = 1

    def __init__(self, degree=1, eps=1e-4, state_index=-1, input_dim=2):
        if degree not in (1, 2, 3):
            raise ValueError("degree must be 1, 2 or 3")
        self.degree = degree
        self.eps = eps
        self.state_index = state_index
        self.input_dim = input_dim
        self.n_params = 2 * degree + 1

    def _features(self, t, x):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        y = np.atleast_2d(x)[:, self.state_index]
        p = np.arange(1, self.degree + 1)
        return np.column_stack([np.ones_like(t), t[:, None] ** p, y[:, None] ** p])

    def eval(self, t, x, theta):
        u = self._features(t, x) @ theta
        return (u ** 2 + self.eps)[:, None, None]

    def jacobian(self, t, x, theta):
        F = self._features(t, x)
        u = F @ theta
        return (2.0 * u[:, None] * F)[:, :, None, None]

    def vjp(self, t, x, theta, G):
        F = self._features(t, x)
        u = F @ theta
        return F.T @ (2.0 * u * G[:, 0, 0])


class ConstantModel(VolatilityModel):
    """Constant family ``Sigma = L L^T`` with ``L`` lower triangular.

    ``theta`` lists the entries of ``L`` row by row; for ``dim = 1`` this is
    ``Sigma = theta^2``.
    """

    def __init__(self, dim=1, input_dim=2):
        self.dim = dim
        self.input_dim = input_dim
        self.n_params = dim * (dim + 1) // 2
        self._rows, self._cols = np.tril_indices(dim)

    def factor(self, theta):
        L = np.zeros((self.dim, self.dim))
        L[self._rows, self._cols] = theta
        return L

    def eval(self, t, x, theta):
        L = self.factor(theta)
        n = np.atleast_1d(t).size
        return np.broadcast_to(L @ L.T, (n, self.dim, self.dim)).copy()

    def vjp(self, t, x, theta, G):
        L = self.factor(theta)
        Gs = np.sum(G, axis=0)
        return ((Gs + Gs.T) @ L)[self._rows, self._cols]


def swish(z):
    return z * expit(z)


def swish_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class ForwardCache:
    pre: list
    act: list
    b: np.ndarray
    sigma: np.ndarray


class NeuralNetModel(VolatilityModel):
    """Feed-forward network ``Sigma = b b^T + eps I``.

    Hidden units are ``u^k = swish(u^{k-1} W_k)`` with no bias terms, and the
    output ``b`` is symmetric with upper-triangular entries ``u^{K-1} W_K``.

    Parameters
    ----------
    input_dim : int
    dim : int
        Output dimension.
    hidden : sequence of int
        Hidden widths ``L_1 .. L_{K-1}``.
    eps : float
        Diagonal floor.
    """

    def __init__(self, input_dim=2, dim=1, hidden=(10, 10), eps=1e-4):
        self.input_dim = int(input_dim)
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.eps = float(eps)
        self.pairs = [(i, j) for i in range(self.dim) for j in range(i, self.dim)]
        widths = (self.input_dim,) + self.hidden + (len(self.pairs),)
        self.shapes = [(widths[k], widths[k + 1]) for k in range(len(widths) - 1)]
        self.n_params = int(sum(a * b for a, b in self.shapes))

    @property
    def depth(self):
        return len(self.shapes)

    def unflatten(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {theta.size}")
        out, pos = [], 0
        for a, b in self.shapes:
            out.append(theta[pos:pos + a * b].reshape(a, b))
            pos += a * b
        return out

    @staticmethod
    def flatten(weights):
        return np.concatenate([w.ravel() for w in weights])

    def init_params(self, rng):
        """Uniform weights on ``+-sqrt(6 / (fan_in + fan_out))``."""
        ws = [rng.uniform(-np.sqrt(6.0 / (a + b)), np.sqrt(6.0 / (a + b)), size=(a, b))
              for a, b in self.shapes]
        return self.flatten(ws)

    def forward(self, x, theta):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"expected input width {self.input_dim}, got {x.shape[1]}")
        W = self.unflatten(theta)
        u = x
        pre, act = [], [x]
        for Wk in W[:-1]:
            z = u @ Wk
            u = swish(z)
            pre.append(z)
            act.append(u)
        out = u @ W[-1]
        b = np.zeros((x.shape[0], self.dim, self.dim))
        for p, (i, j) in enumerate(self.pairs):
            b[:, i, j] = out[:, p]
            b[:, j, i] = out[:, p]
        sigma = b @ b + self.eps * np.eye(self.dim)
        return ForwardCache(pre=pre, act=act, b=b, sigma=sigma)

    def backward(self, cache, G, theta):
        G = np.asarray(G, dtype=float)
        if G.shape != cache.sigma.shape:
            raise ShapeMismatch("cotangent shape does not match the forward pass")
        W = self.unflatten(theta)
        Gb = (G + np.swapaxes(G, 1, 2)) @ cache.b
        dout = np.empty((G.shape[0], len(self.pairs)))
        for p, (i, j) in enumerate(self.pairs):
            dout[:, p] = Gb[:, i, j] if i == j else Gb[:, i, j] + Gb[:, j, i]
        grads = [None] * len(W)
        grads[-1] = cache.act[-1].T @ dout
        delta = dout @ W[-1].T
        for k in range(len(W) - 2, -1, -1):
            dz = delta * swish_grad(cache.pre[k])
            grads[k] = cache.act[k].T @ dz
            delta = dz @ W[k].T
        return self.flatten(grads)

    def eval(self, t, x, theta):
        return self.forward(x, theta).sigma

    def vjp(self, t, x, theta, G):
        return self.backward(self.forward(x, theta), G, theta)


def nn_forward(model, x_in, theta):
    """Forward pass returning the activation cache, ``b`` and ``Sigma``."""
    return model.forward(x_in, theta)


def nn_backward(model, cache, G, theta):
    """Gradient of ``sum G * Sigma`` with respect to all weights."""
    return model.backward(cache, G, theta)


@dataclass
class AdadeltaState:
    """Running averages of squared gradients and squared updates."""

    sq_grad: np.ndarray
    sq_update: np.ndarray
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0

    @classmethod
    def zeros(cls, n, rho=0.95, eps=1e-6, lr=1.0):
        return cls(np.zeros(n), np.zeros(n), rho, eps, lr)


def adadelta_step(theta, grad, state, weight_decay=0.0):
    """One ADADELTA update of ``theta`` for minimising a loss.

    Parameters
    ----------
    theta : ndarray
    grad : ndarray
        Gradient of the loss; ``2 * weight_decay * theta`` is added to it.
    state : AdadeltaState
    weight_decay : float

    Returns
    -------
    theta : ndarray
    state : AdadeltaState
    """
    g = grad + 2.0 * weight_decay * theta
    rho, eps = state.rho, state.eps
    sq_grad = rho * state.sq_grad + (1.0 - rho) * g * g
    delta = -np.sqrt(state.sq_update + eps) / np.sqrt(sq_grad + eps) * g
    sq_update = rho * state.sq_update + (1.0 - rho) * delta * delta
    new = AdadeltaState(sq_grad, sq_update, rho, eps, state.lr)
    return theta + state.lr * delta, new


@dataclass
class TrainResult:
    theta: np.ndarray
    checkpoints: dict
    trace: list = field(default_factory=list)
    path_order: list = field(default_factory=list)


def train(objectives, theta0, epochs, seed=0, checkpoints=(), weight_decay=0.005,
          rho=0.95, eps=1e-6, lr=1.0):
    """Stochastic training with ADADELTA over several data sets.

    Each epoch picks one data set uniformly at random and takes one step on
    the loss ``-objective``.

    Parameters
    ----------
    objectives : list of callable
        ``theta -> (value, grad)`` per data set.
    theta0 : ndarray
    epochs : int
    seed : int
        Seeds the data-set selection stream.
    checkpoints : iterable of int
        Epoch counts at which to store a copy of ``theta``.

    Returns
    -------
    TrainResult
    """
    rng = np.random.default_rng(seed)
    theta = np.array(theta0, dtype=float)
    state = AdadeltaState.zeros(theta.size, rho, eps, lr)
    keep = set(int(c) for c in checkpoints)
    saved, trace, order = {}, [], []
    if 0 in keep:
        saved[0] = theta.copy()
    for epoch in range(1, epochs + 1):
        i = int(rng.integers(len(objectives)))
        order.append(i)
        value, grad = objectives[i](theta)
        trace.append(float(value))
        theta, state = adadelta_step(theta, -np.asarray(grad), state, weight_decay)
        if epoch in keep:
            saved[epoch] = theta.copy()
    return TrainResult(theta=theta, checkpoints=saved, trace=trace, path_order=order)
