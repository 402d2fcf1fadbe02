"""
Evaluation metrics: divergence between co-volatility paths, its L2 sandwich,
grid errors of fitted models and the asymptotic-variance matrices.

Paths are scaled by ``Dc[i, j] = Sigma[i, j] sqrt(a_i a_j) / sqrt(v_i v_j)``
before comparison. Time integrals use the trapezoid rule on the given grid.
"""
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .errors import NotPD, NotPSD
from .matan import TOL_PSD, frak_k1, frak_k2, phi, sym_inv_sqrt

DIVERGENCE_RTOL = 1e-9


@dataclass
class ScaledVolPath:
    """Co-volatility path with intensities and noise variances.

    Parameters
    ----------
    times : ndarray, shape (N,)
    sigma : ndarray, shape (N, dim, dim)
    a : ndarray, shape (dim,) or (N, dim)
    v : ndarray, shape (dim,)
    """

    times: np.ndarray
    sigma: np.ndarray
    a: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma.ndim == 1:
            self.sigma = self.sigma[:, None, None]
        n, d = self.sigma.shape[0], self.sigma.shape[1]
        self.a = np.broadcast_to(np.asarray(self.a, dtype=float), (n, d))
        self.v = np.broadcast_to(np.asarray(self.v, dtype=float), (d,))

    @property
    def ratio(self):
        """``a / v`` per grid point."""
        return self.a / self.v

    def scaled(self):
        r = np.sqrt(self.ratio)
        return self.sigma * r[:, :, None] * r[:, None, :]


def _batched_roots(D, name):
    """Square roots and inverse square roots of a stack of symmetric matrices."""
    D = 0.5 * (D + np.swapaxes(D, 1, 2))
    lam, U = np.linalg.eigh(D)
    scale = np.max(np.abs(lam), axis=1, initial=0.0)
    low = lam[:, 0] < -TOL_PSD * scale
    if np.any(low):
        i = int(np.argmax(low))
        raise NotPSD(f"{name} path is not positive semi-definite at grid point {i}")
    lam_c = np.maximum(lam, 0.0)
    root = np.einsum("nij,nj,nkj->nik", U, np.sqrt(lam_c), U)
    return lam, U, root


def divergence_integrands(p1, p2):
    """Both pointwise integrand forms of the divergence.

    Returns
    -------
    three_term : ndarray
        ``tr((D2 - D1) D1^{-1/2})/4 - tr(D2^{1/2})/2 + tr(D1^{1/2})/2``.
    squared : ndarray
        ``tr((D2^{1/2} - D1^{1/2})^2 D1^{-1/2})/4``.
    magnitude : ndarray
        Sum of absolute values of the three-term pieces, for tolerances.
    """
    D1 = p1.scaled()
    D2 = p2.scaled()
    lam1, U1, R1 = _batched_roots(D1, "first")
    bad = lam1[:, 0] <= 0
    if np.any(bad):
        raise NotPD(f"first path is not positive definite at grid point {int(np.argmax(bad))}")
    _, _, R2 = _batched_roots(D2, "second")
    W = np.einsum("nij,nj,nkj->nik", U1, 1.0 / np.sqrt(lam1), U1)
    t1 = 0.25 * np.einsum("nij,nji->n", D2 - D1, W)
    t2 = -0.5 * np.trace(R2, axis1=1, axis2=2)
    t3 = 0.5 * np.trace(R1, axis1=1, axis2=2)
    dR = R2 - R1
    sq = 0.25 * np.einsum("nij,njk,nki->n", dR, dR, W)
    return t1 + t2 + t3, sq, np.abs(t1) + np.abs(t2) + np.abs(t3)


def divergence_D(p1, p2, check=True):
    """Divergence ``D(Sigma_1, Sigma_2)`` between two scaled paths on a shared grid.

    Parameters
    ----------
    p1 : ScaledVolPath
        Positive definite at every grid point.
    p2 : ScaledVolPath
    check : bool
        Also integrate the three-term form and assert agreement.

    Returns
    -------
    float
    """
    three, sq, mag = divergence_integrands(p1, p2)
    val = float(trapezoid(sq, p1.times))
    if check:
        alt = float(trapezoid(three, p1.times))
        # the three-term form cancels terms of size `mag`, so allow for its rounding
        tol = DIVERGENCE_RTOL * abs(val) + 1e-12 * float(trapezoid(mag, p1.times))
        if abs(alt - val) > tol:
            raise AssertionError(f"divergence forms disagree: {val!r} vs {alt!r}")
    return val


@dataclass
class SandwichResult:
    l2: float
    D: float
    C1: float
    C2: float
    holds: bool


def l2_sandwich_check(p1, p2, rtol=1e-10):
    """Check ``C1 * L2 <= D <= C2 * L2`` with ``L2 = int |Sigma_1 - Sigma_2|_F^2 dt``.

    With ``r = a / v``, ``C2 = (1/4) (sup ||Sigma_1^{-1}|| / inf r)^{3/2} (sup r)^2``
    and ``C1 = (1/4) (inf r)^2 / (s_1^{1/2} (s_1^{1/2} + s_2^{1/2})^2)`` where
    ``s_i = sup r * sup ||Sigma_i||``.

    The comparisons allow a relative slack ``rtol`` because the lower bound is
    attained in the scalar constant case.
    """
    diff = p1.sigma - p2.sigma
    l2 = float(trapezoid(np.sum(diff ** 2, axis=(1, 2)), p1.times))
    D = divergence_D(p1, p2)
    r = np.concatenate([p1.ratio.ravel(), p2.ratio.ravel()])
    r_lo, r_hi = float(r.min()), float(r.max())
    inv1 = max(1.0 / np.linalg.eigvalsh(S)[0] for S in p1.sigma)
    s1 = r_hi * max(np.linalg.eigvalsh(S)[-1] for S in p1.sigma)
    s2 = r_hi * max(max(np.linalg.eigvalsh(S)[-1], 0.0) for S in p2.sigma)
    C2 = 0.25 * (inv1 / r_lo) ** 1.5 * r_hi ** 2
    C1 = 0.25 * r_lo ** 2 / (np.sqrt(s1) * (np.sqrt(s1) + np.sqrt(s2)) ** 2)
    holds = bool(C1 * l2 * (1 - rtol) <= D + 1e-300 and D <= C2 * l2 * (1 + rtol) + 1e-300)
    return SandwichResult(l2=l2, D=D, C1=float(C1), C2=float(C2), holds=holds)


MSE_GRIDS = {
    "mse1": 0.1 * np.arange(1, 21),
    "mse2": 0.1 + 0.1 * np.arange(1, 21),
}


def default_input(t, y):
    """Model input ``(t, y_1, ..., y_dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.column_stack([t, np.atleast_2d(y)])


def mse_grid(model, theta, truth, grid="mse1", make_input=default_input):
    """Root-mean-square error of ``Sigma(t, x, theta)`` against ``truth`` on a fixed grid.

    Parameters
    ----------
    model : VolatilityModel
    theta : ndarray
    truth : callable
        ``truth(t, y) -> (N, dim, dim)``.
    grid : {"mse1", "mse2"}
        ``x_i = 0.1 i`` or ``0.1 + 0.1 i`` for ``i = 1..20``. One-dimensional
        models are evaluated at ``t = 0``; two-dimensional ones on the
        ``20 x 20 x 20`` grid of ``(t_j, x_i, x_l)`` with ``t_j = 0.05 j``, and
        the squared entrywise error is summed over matrix entries and divided by 8000.
    make_input : callable
        ``(t, y) -> x`` mapping a state to the model input.

    Returns
    -------
    float
    """
    xs = MSE_GRIDS[grid]
    if model.dim == 1:
        t = np.zeros(xs.size)
        y = xs[:, None]
        err = model.eval(t, make_input(t, y), theta) - truth(t, y)
        return float(np.sqrt(np.mean(err[:, 0, 0] ** 2)))
    tj = 0.05 * np.arange(1, 21)
    T, X1, X2 = np.meshgrid(tj, xs, xs, indexing="ij")
    t = T.ravel()
    y = np.column_stack([X1.ravel(), X2.ravel()])
    err = model.eval(t, make_input(t, y), theta) - truth(t, y)
    return float(np.sqrt(np.sum(err ** 2) / 8000.0))


def _scaled_model(model, theta, times, x_path, ratio):
    r = np.sqrt(ratio)
    S = r[:, :, None] * r[:, None, :]
    return model.eval(times, x_path, theta) * S, model.jacobian(times, x_path, theta) * S[:, None]


def _first_derivs(model, theta, times, x_path, ratio):
    D, J = _scaled_model(model, theta, times, x_path, ratio)
    dR = np.array([[phi(D[n], J[n, p]) for p in range(J.shape[1])] for n in range(D.shape[0])])
    return D, dR


def _ratio(a, v, n, d):
    return np.broadcast_to(np.asarray(a, dtype=float), (n, d)) / np.broadcast_to(np.asarray(v, dtype=float), (d,))


def gamma2(model, theta, times, x_path, truth_sigma, a, v, step=1e-4):
    """Curvature matrix of the limiting divergence at ``theta``.

    Integrand ``(1/4) tr(d_pq R (I - R^{-1} Ddag R^{-1}) + Ddag R^{-1} (d_p R R^{-1} d_q R + d_q R R^{-1} d_p R) R^{-1})``
    with ``R = Dc(theta)^{1/2}``. First derivatives of ``R`` are analytic;
    second derivatives are central differences of the first with step
    ``step * (1 + |theta_q|)``.

    Parameters
    ----------
    model : VolatilityModel
    theta : ndarray
    times : ndarray, shape (N,)
    x_path : ndarray, shape (N, dim_x)
        Model inputs along the path.
    truth_sigma : ndarray, shape (N, dim, dim)
    a : ndarray
        Intensities, shape (dim,) or (N, dim).
    v : ndarray, shape (dim,)

    Returns
    -------
    ndarray, shape (n_params, n_params)
    """
    theta = np.asarray(theta, dtype=float)
    n, d = truth_sigma.shape[0], truth_sigma.shape[1]
    ratio = _ratio(a, v, n, d)
    r = np.sqrt(ratio)
    Ddag = truth_sigma * r[:, :, None] * r[:, None, :]
    D, dR = _first_derivs(model, theta, times, x_path, ratio)
    P = theta.size
    d2R = np.zeros((n, P, P, d, d))
    for q in range(P):
        h = step * (1.0 + abs(theta[q]))
        tp, tm = theta.copy(), theta.copy()
        tp[q] += h
        tm[q] -= h
        _, up = _first_derivs(model, tp, times, x_path, ratio)
        _, dn = _first_derivs(model, tm, times, x_path, ratio)
        d2R[:, :, q] = (up - dn) / (2 * h)
    d2R = 0.5 * (d2R + np.swapaxes(d2R, 1, 2))
    vals = np.zeros((n, P, P))
    I = np.eye(d)
    for k in range(n):
        Ri = sym_inv_sqrt(D[k])
        W = I - Ri @ Ddag[k] @ Ri
        for p in range(P):
            for q in range(p, P):
                cross = dR[k, p] @ Ri @ dR[k, q] + dR[k, q] @ Ri @ dR[k, p]
                val = np.trace(d2R[k, p, q] @ W) + np.trace(Ddag[k] @ Ri @ cross @ Ri)
                vals[k, p, q] = vals[k, q, p] = 0.25 * val
    return trapezoid(vals, times, axis=0)


def gamma1(model, theta, times, x_path, truth_sigma, a, v):
    """Variance matrix of the score of the bias-corrected objective.

    Integrand ``(1/2) {tr(R^{-1} d_p R d_q R) + K1(Dc, d_p Dc, d_q Dc; Ddag - Dc) + K2(...)}``
    with the correction forms polarised in the two derivative directions.

    Returns
    -------
    ndarray, shape (n_params, n_params)
    """
    theta = np.asarray(theta, dtype=float)
    n, d = truth_sigma.shape[0], truth_sigma.shape[1]
    ratio = _ratio(a, v, n, d)
    r = np.sqrt(ratio)
    Ddag = truth_sigma * r[:, :, None] * r[:, None, :]
    D, J = _scaled_model(model, theta, times, x_path, ratio)
    P = theta.size
    vals = np.zeros((n, P, P))
    for k in range(n):
        Ri = sym_inv_sqrt(D[k])
        dR = [phi(D[k], J[k, p]) for p in range(P)]
        C = Ddag[k] - D[k]
        for p in range(P):
            for q in range(p, P):
                base = 0.5 * (np.trace(Ri @ dR[p] @ dR[q]) + np.trace(Ri @ dR[q] @ dR[p]))
                k1 = frak_k1(D[k], J[k, p], C, J[k, q])
                k2 = frak_k2(D[k], J[k, p], C, J[k, q])
                vals[k, p, q] = vals[k, q, p] = 0.5 * (base + k1 + k2)
    return trapezoid(vals, times, axis=0)


def sandwich_covariance(g1, g2, b_n):
    """Asymptotic covariance ``Gamma2^{-1} Gamma1 Gamma2^{-1} / sqrt(b_n)`` of the estimator."""
    G2i = np.linalg.inv(np.atleast_2d(g2))
    return G2i @ np.atleast_2d(g1) @ G2i / np.sqrt(b_n)
