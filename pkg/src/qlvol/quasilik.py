"""
Block quasi-log-likelihood.

Within block ``m`` the stacked increment vector ``Z_m`` is treated as Gaussian
with covariance ``S_m(B, v)`` whose ``(k, l)`` component block is
``B_kl G_kl + 1{k=l} v_k M(k_m^k)``, where ``G_kl`` holds interval overlap
lengths. The quasi-log-likelihood sums ``-(Z^T S^{-1} Z + log det S)/2`` over
blocks ``m >= 2`` with ``B = Sigma(s_{m-1}, Xhat_{m-1}, theta)``.

Gradients with respect to the per-block model matrices use the Frobenius
pairing ``dH = sum_ij G_ij dSigma_ij``, so off-diagonal entries of a symmetric
``Sigma`` each receive half of the derivative along the shared parameter.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack
from scipy.optimize import minimize

from .errors import ContractionViolated, EmptyExplanatoryBlock, NonFinite, NotPD
from .observation import (block_increments, local_average_X, overlap_matrix,
                          tridiag_M)

log = logging.getLogger(__name__)


@dataclass
class BlockGeometry:
    """Sampling geometry of one block.

    Attributes
    ----------
    m : int
    sizes : ndarray of int
        ``k_m^j`` per component.
    overlaps : dict
        ``(k, l) -> G_kl`` for ``k <= l``; ``G_kk`` is stored as its diagonal vector.
    """

    m: int
    sizes: np.ndarray
    overlaps: dict

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def total(self):
        return int(self.sizes.sum())

    @classmethod
    def from_layout(cls, layout, m):
        sizes = layout.counts(m).copy()
        overlaps = {}
        for k in range(layout.dim):
            s, e = layout.intervals(m, k)
            overlaps[(k, k)] = e - s
            for l in range(k + 1, layout.dim):
                overlaps[(k, l)] = overlap_matrix(layout, m, k, l)
        return cls(m=m, sizes=sizes, overlaps=overlaps)

    def pattern_sums(self, W):
        """``sum_ij W_(k,l)[i,j] P_kl[i,j]`` for every entry pair, returned as a symmetric matrix."""
        g = len(self.sizes)
        o = self.offsets
        out = np.empty((g, g))
        for k in range(g):
            blk = W[o[k]:o[k + 1], o[k]:o[k + 1]]
            out[k, k] = np.diagonal(blk) @ self.overlaps[(k, k)]
            for l in range(k + 1, g):
                val = np.sum(W[o[k]:o[k + 1], o[l]:o[l + 1]] * self.overlaps[(k, l)])
                out[k, l] = out[l, k] = val
        return out


def assemble_matrix(B, v, geom):
    """Dense ``S_m(B, v)`` for a block geometry."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    g = len(geom.sizes)
    o = geom.offsets
    S = np.zeros((geom.total, geom.total))
    for k in range(g):
        n = geom.sizes[k]
        sl = slice(o[k], o[k + 1])
        S[sl, sl] = B[k, k] * np.diag(geom.overlaps[(k, k)]) + v[k] * tridiag_M(n)
        for l in range(k + 1, g):
            blk = B[k, l] * geom.overlaps[(k, l)]
            S[sl, o[l]:o[l + 1]] = blk
            S[o[l]:o[l + 1], sl] = blk.T
    return S


@dataclass
class LocalCovariance:
    """``S_m(B, v)`` with its lower Cholesky factor when positive definite."""

    m: int
    matrix: np.ndarray
    chol: np.ndarray = None
    pd: bool = False

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diagonal(self.chol))))

    def solve(self, rhs):
        x, info = lapack.dpotrs(self.chol, rhs, lower=1)
        return x

    def inverse(self):
        inv, info = lapack.dpotri(self.chol, lower=1)
        inv = np.tril(inv)
        return inv + np.tril(inv, -1).T


def _factor(S, m, raise_on_fail=True):
    c, info = lapack.dpotrf(S, lower=1, clean=1)
    if info != 0:
        if raise_on_fail:
            raise NotPD("S_m is not positive definite", block=m)
        return LocalCovariance(m=m, matrix=S)
    return LocalCovariance(m=m, matrix=S, chol=c, pd=True)


def assemble_S(B, v, layout, m, raise_on_fail=True):
    """Assemble and factor ``S_m(B, v)`` for block ``m`` of ``layout``.

    Parameters
    ----------
    B : array_like, shape (dim, dim)
        Symmetric.
    v : array_like, shape (dim,)
        Noise variances, nonnegative.
    layout : BlockLayout
    m : int
    raise_on_fail : bool
        Raise ``NotPD`` when the Cholesky factorization fails; otherwise
        return a covariance with ``pd=False``.

    Returns
    -------
    LocalCovariance
    """
    geom = BlockGeometry.from_layout(layout, m)
    return _factor(assemble_matrix(B, v, geom), m, raise_on_fail)


@dataclass
class BlockSystem:
    """Data for the objective sums: geometry, increments and model inputs per usable block.

    Attributes
    ----------
    layout : BlockLayout
    blocks : list of BlockGeometry
        Usable blocks ``m >= 2``.
    z : list of ndarray
        Stacked increments per usable block.
    t_in : ndarray, shape (M,)
        ``s_{m-1}`` per usable block.
    x_in : ndarray, shape (M, dim_x)
        ``Xhat_{m-1}`` per usable block.
    skipped : list of int
        Blocks ``m >= 2`` excluded for missing increments or explanatory data.
    """

    layout: object
    blocks: list
    z: list
    t_in: np.ndarray
    x_in: np.ndarray
    skipped: list = field(default_factory=list)
    obs: object = None

    @property
    def block_ids(self):
        return [g.m for g in self.blocks]

    @classmethod
    def build(cls, obs, layout, min_count=1):
        """Collect usable blocks.

        A block ``m >= 2`` is used when every component has at least
        ``min_count`` increments in it and block ``m - 1`` holds at least one
        observation of every explanatory component. Observations without an
        explanatory series are given ``X = (t, Y)``.
        """
        if not obs.has_explanatory:
            obs = obs.with_time_state()
        blocks, zs, ts, xs, skipped = [], [], [], [], []
        for m in range(2, layout.n_blocks + 1):
            if np.any(layout.counts(m) < min_count):
                skipped.append(m)
                continue
            try:
                xhat = local_average_X(layout, obs, m - 1)
            except EmptyExplanatoryBlock:
                skipped.append(m)
                continue
            blocks.append(BlockGeometry.from_layout(layout, m))
            zs.append(block_increments(obs, layout, m))
            ts.append(layout.boundaries[m - 1])
            xs.append(xhat)
        if skipped:
            log.info("skipping %d of %d blocks", len(skipped), layout.n_blocks - 1)
        x_in = np.array(xs) if xs else np.zeros((0, len(obs.x_times)))
        return cls(layout=layout, blocks=blocks, z=zs, t_in=np.array(ts), x_in=x_in,
                   skipped=skipped, obs=obs)


@dataclass
class ObjectiveEval:
    """Objective value with its gradients.

    Attributes
    ----------
    value : float
    grad_sigma : ndarray, shape (M, dim, dim)
        Derivative with respect to each block's model matrix.
    grad_theta : ndarray or None
    diagnostics : dict
    """

    value: float
    grad_sigma: np.ndarray
    grad_theta: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)


def _pairwise_sum(x):
    return math.fsum(x)


def block_loglik(Sigma, v, geom, z, gradient=True):
    """Value and ``Sigma``-gradient of ``-(z^T S^{-1} z + log det S)/2`` for one block."""
    cov = _factor(assemble_matrix(Sigma, v, geom), geom.m)
    alpha = cov.solve(z)
    value = -0.5 * (alpha @ z + cov.logdet())
    if not gradient:
        return value, None, cov
    W = cov.inverse() - np.outer(alpha, alpha)
    return value, -0.5 * geom.pattern_sums(W), cov


def quasi_loglik(model, theta, v_hat, system, gradient=True):
    """Quasi-log-likelihood ``H_n(theta, v)`` and its gradients.

    Parameters
    ----------
    model : VolatilityModel
    theta : ndarray
    v_hat : ndarray, shape (dim,)
    system : BlockSystem
    gradient : bool

    Returns
    -------
    ObjectiveEval

    Raises
    ------
    NotPD
        With the index of the first block whose ``S_m`` fails to factor.
    """
    Sig = model.eval(system.t_in, system.x_in, theta)
    vals = []
    grads = np.zeros_like(Sig)
    min_pivot = np.inf
    for i, (geom, z) in enumerate(zip(system.blocks, system.z)):
        val, G, cov = block_loglik(Sig[i], v_hat, geom, z, gradient)
        vals.append(val)
        min_pivot = min(min_pivot, float(np.min(np.diagonal(cov.chol))))
        if gradient:
            grads[i] = G
    out = ObjectiveEval(value=_pairwise_sum(vals), grad_sigma=grads,
                        diagnostics={"skipped": list(system.skipped), "min_pivot": min_pivot})
    if gradient:
        out.grad_theta = model.vjp(system.t_in, system.x_in, theta, grads)
    if not np.isfinite(out.value):
        raise NonFinite("quasi-log-likelihood is not finite")
    return out


def _block_parts(B, v, geom):
    g = len(geom.sizes)
    o = geom.offsets
    D_inv, off = [], {}
    for k in range(g):
        n = geom.sizes[k]
        Dk = B[k, k] * np.diag(geom.overlaps[(k, k)]) + v[k] * tridiag_M(n)
        D_inv.append(np.linalg.inv(Dk))
    for k in range(g):
        for l in range(g):
            if k < l:
                off[(k, l)] = B[k, l] * geom.overlaps[(k, l)]
            elif k > l:
                off[(k, l)] = B[k, l] * geom.overlaps[(l, k)].T
    return D_inv, off, o


def contraction_ratio(B):
    """``|| B'^{-1/2} Abs(B - B') B'^{-1/2} ||`` with ``B'`` the diagonal of ``B``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    d = np.sqrt(np.diagonal(B))
    R = np.abs(B - np.diag(np.diagonal(B))) / np.outer(d, d)
    return float(np.linalg.norm(R, 2))


def _check_contraction(B):
    r = contraction_ratio(B)
    if not r < 1.0:
        raise ContractionViolated(f"contraction ratio {r:.4f} is not below 1")
    return r


def inverse_series_oracle(B, v, layout, m, P):
    """Truncated path expansion of ``S_m(B, v)^{-1}``.

    Sums, for path lengths ``p <= P`` over component sequences with
    consecutive entries distinct, ``(-1)^p prod B_{i_{l-1} i_l}`` times the
    chained products ``D_{i_0}^{-1} G_{i_0 i_1} D_{i_1}^{-1} ... D_{i_p}^{-1}``
    placed in component block ``(i_0, i_p)``.

    Raises
    ------
    ContractionViolated
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    _check_contraction(B)
    geom = BlockGeometry.from_layout(layout, m)
    D_inv, off, o = _block_parts(B, v, geom)
    g = len(D_inv)
    # paths[a][b]: sum over length-p paths from a ending in b, including the trailing D_b^{-1}
    paths = [[D_inv[a] if a == b else None for b in range(g)] for a in range(g)]
    out = np.zeros((geom.total, geom.total))

    def add(paths, sign):
        for a in range(g):
            for b in range(g):
                if paths[a][b] is not None:
                    out[o[a]:o[a + 1], o[b]:o[b + 1]] += sign * paths[a][b]

    add(paths, 1.0)
    for p in range(1, P + 1):
        new = [[None] * g for _ in range(g)]
        for a in range(g):
            for b in range(g):
                acc = None
                for c in range(g):
                    if c == b or paths[a][c] is None:
                        continue
                    term = paths[a][c] @ off[(c, b)] @ D_inv[b]
                    acc = term if acc is None else acc + term
                new[a][b] = acc
        paths = new
        add(paths, (-1.0) ** p)
    return out


def logdet_series_oracle(B, v, layout, m, P):
    """Truncated cycle expansion of ``log det S_m(B, v)``.

    ``sum_i log det D_i - sum_{p=1..P} ((-1)^p / p) * sum over closed cycles of
    prod B * tr(prod D^{-1} G)``.

    Raises
    ------
    ContractionViolated
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    _check_contraction(B)
    geom = BlockGeometry.from_layout(layout, m)
    D_inv, off, o = _block_parts(B, v, geom)
    g = len(D_inv)
    total = -sum(np.linalg.slogdet(Di)[1] for Di in D_inv)
    # chains[a][b]: sum over length-p walks from a to b of D_a^{-1} G ... D^{-1} G (ending with G into b)
    chains = [[np.eye(geom.sizes[a]) if a == b else None for b in range(g)] for a in range(g)]
    for p in range(1, P + 1):
        new = [[None] * g for _ in range(g)]
        for a in range(g):
            for b in range(g):
                acc = None
                for c in range(g):
                    if c == b or chains[a][c] is None:
                        continue
                    term = chains[a][c] @ D_inv[c] @ off[(c, b)]
                    acc = term if acc is None else acc + term
                new[a][b] = acc
        chains = new
        cyc = sum(np.trace(chains[a][a]) for a in range(g) if chains[a][a] is not None)
        total -= ((-1.0) ** p / p) * cyc
    return float(total)


@dataclass
class FitResult:
    theta: np.ndarray
    value: float
    trace: list
    method: str
    converged: bool = True


def golden_section_max(f, lo, hi, tol=1e-8, max_iter=200):
    """Maximise a unimodal scalar function on ``[lo, hi]`` by golden-section search.

    Returns
    -------
    x : float
    fx : float
    trace : list of float
    """
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    trace = [max(fc, fd)]
    for _ in range(max_iter):
        if b - a <= tol * (1.0 + abs(a) + abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
        trace.append(max(fc, fd))
    x = c if fc >= fd else d
    return x, max(fc, fd), trace


def _safe(objective):
    def value(theta):
        try:
            v = objective(np.atleast_1d(theta))[0]
        except NotPD:
            return -np.inf
        return v if np.isfinite(v) else -np.inf
    return value


def fit_argmax(objective, theta0, method="auto", bounds=None, grid=None, tol=1e-8, max_iter=500):
    """Maximise an objective returning ``(value, gradient)``.

    Parameters
    ----------
    objective : callable
        ``theta -> (value, grad)``. Raising ``NotPD`` marks a rejected point.
    theta0 : array_like
    method : {"auto", "golden", "lbfgs"}
        ``"auto"`` uses golden-section search for one parameter and L-BFGS-B otherwise.
    bounds : sequence of (lo, hi), optional
        Required for golden-section search; the bracket is refined from a
        coarse scan over ``grid`` (default 41 points across ``bounds``).
    tol : float
    max_iter : int

    Returns
    -------
    FitResult

    Raises
    ------
    NonFinite
        If no finite objective value is found.
    """
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    if method == "auto":
        method = "golden" if theta0.size == 1 and bounds is not None else "lbfgs"
    f = _safe(objective)
    if method == "golden":
        lo, hi = bounds[0]
        if grid is None:
            grid = np.linspace(lo, hi, 41)
        vals = np.array([f(np.array([g])) for g in grid])
        if not np.any(np.isfinite(vals)):
            raise NonFinite("objective is not finite on the search grid")
        i = int(np.argmax(vals))
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        x, fx, trace = golden_section_max(lambda s: f(np.array([s])), a, b, tol=tol)
        return FitResult(theta=np.array([x]), value=fx, trace=list(vals[np.isfinite(vals)]) + trace,
                         method="golden")
    trace = []

    def neg(theta):
        try:
            val, grad = objective(theta)
        except NotPD:
            return np.inf, np.zeros_like(theta)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(theta)
        trace.append(val)
        return -val, -np.asarray(grad, dtype=float)

    res = minimize(neg, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": max_iter, "ftol": tol * 1e-3, "gtol": tol})
    if not np.isfinite(res.fun):
        raise NonFinite("objective diverged")
    return FitResult(theta=res.x, value=-float(res.fun), trace=trace, method="lbfgs",
                     converged=bool(res.success))
