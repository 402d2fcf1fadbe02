"""
Pre-averaging, bias correction and the fast surrogate objective.

For each block the pre-averaged estimate ``B_m`` of the local co-volatility
is built from increments weighted by ``g(l / (k + 1))``. Together with the
intensity estimates ``a_m`` it yields the scaled matrices

    Dhat_dag = (sqrt(a_i a_j) B_m[i, j]),    Dhat(theta) = (sqrt(a_i a_j) Sigma_m(theta)[i, j]),

which feed both the bias correction of the quasi-log-likelihood and the fast
objective ``-(T / (4 l_n)) sum_m tr((Dhat_dag + Dhat) Dhat^{-1/2})``. The fast
objective only factors ``dim x dim`` matrices.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import BlockTooSmall, NotPD, SimplificationMismatch
from .matan import batched_sqrt_terms, sym_inv_sqrt, sym_sqrt
from .quasilik import BlockGeometry, ObjectiveEval, _factor, assemble_matrix

SIMPLIFICATION_RTOL = 1e-8


def triangle(x):
    return np.minimum(x, 1.0 - x)


def triangle_grad(x):
    return np.where(x < 0.5, 1.0, -1.0)


@dataclass(frozen=True)
class WeightFn:
    """Pre-averaging weight ``g`` on ``[0, 1]`` with ``psi1 = int g^2`` and ``psi2 = int g'^2``.

    The constants are integrated numerically unless given.
    """

    g: object = triangle
    dg: object = triangle_grad
    psi1: float = None
    psi2: float = None
    breakpoints: tuple = (0.5,)

    def __post_init__(self):
        pts = list(self.breakpoints) or None
        if self.psi1 is None:
            val = quad(lambda x: float(self.g(x)) ** 2, 0.0, 1.0, points=pts, epsabs=1e-14, epsrel=1e-13)[0]
            object.__setattr__(self, "psi1", val)
        if self.psi2 is None:
            val = quad(lambda x: float(self.dg(x)) ** 2, 0.0, 1.0, points=pts, epsabs=1e-14, epsrel=1e-13)[0]
            object.__setattr__(self, "psi2", val)
        if not self.psi1 > 0:
            raise ValueError("weight function must have positive psi1")


@dataclass
class PreAveraged:
    """Per-block pre-averaged covariances, intensities and model inputs.

    Attributes
    ----------
    blocks : list of int
    B : ndarray, shape (M, dim, dim)
    a_hat : ndarray, shape (M, dim)
    t_in, x_in : ndarray
        Model inputs ``s_{m-1}`` and ``Xhat_{m-1}`` per block.
    T : float
    n_blocks : int
    b_n : float
    """

    blocks: list
    B: np.ndarray
    a_hat: np.ndarray
    t_in: np.ndarray
    x_in: np.ndarray
    T: float
    n_blocks: int
    b_n: float

    def to_csv(self, path):
        """Write the pre-averaged matrices as ``m,i,j,value`` rows."""
        lines = ["m,i,j,value"]
        for m, Bm in zip(self.blocks, self.B):
            g = Bm.shape[0]
            lines.extend(f"{m},{i},{j},{float(Bm[i, j])!r}" for i in range(g) for j in range(g))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _weighted_sum(z, g):
    k = z.size
    return float(g.g(np.arange(1, k + 1) / (k + 1.0)) @ z)


def preaveraged_from_increments(zs, v_hat, g, n_blocks, T):
    """Pre-averaged matrix from per-component increment vectors of one block."""
    ks = np.array([z.size for z in zs])
    if np.any(ks < 2):
        raise BlockTooSmall(f"pre-averaging needs at least two increments per component, got {ks.tolist()}")
    w = np.array([_weighted_sum(z, g) for z in zs])
    B = np.outer(w, w) - np.diag(np.asarray(v_hat) / ks * g.psi2)
    return n_blocks / (T * g.psi1) * B


def _split(z, sizes):
    return np.split(z, np.cumsum(sizes)[:-1])


def preaveraged_B(obs, layout, v_hat, g, m):
    """Pre-averaged local covariance of block ``m``.

    ``B[i, j] = (l_n / (T psi1)) ((sum_l g^i_l Z^i_l)(sum_l g^j_l Z^j_l) - (v_i / k^i) psi2 1{i=j})``
    with ``g^j_l = g(l / (k^j + 1))``.

    Raises
    ------
    BlockTooSmall
        If some component has fewer than two increments in the block.
    """
    from .observation import block_increments

    zs = []
    for j in range(obs.dim):
        if layout.k[m - 1, j] < 2:
            raise BlockTooSmall(f"block {m} component {j} has {layout.k[m - 1, j]} increments")
        zs.append(block_increments(obs, layout, m, component=j))
    return preaveraged_from_increments(zs, v_hat, g, layout.n_blocks, layout.T)


def intensities(counts, v_hat, T, k_n):
    """``a^i = k^i / (T k_n v_i)``, set to 0 where ``v_i = 0``."""
    v = np.asarray(v_hat, dtype=float)
    safe = np.where(v > 0, v, 1.0)
    return np.where(v > 0, np.asarray(counts, dtype=float) / (T * k_n * safe), 0.0)


def preaverage(system, v_hat, g=None):
    """Pre-averaged matrices and intensity estimates for every block of ``system``.

    ``system`` must be built with ``min_count=2``.
    """
    g = g or WeightFn()
    lay = system.layout
    Bs, As = [], []
    for geom, z in zip(system.blocks, system.z):
        Bs.append(preaveraged_from_increments(_split(z, geom.sizes), v_hat, g, lay.n_blocks, lay.T))
        As.append(intensities(geom.sizes, v_hat, lay.T, lay.k_n))
    dim = lay.dim
    return PreAveraged(blocks=system.block_ids, B=np.array(Bs).reshape(-1, dim, dim),
                       a_hat=np.array(As).reshape(-1, dim), t_in=system.t_in, x_in=system.x_in,
                       T=lay.T, n_blocks=lay.n_blocks, b_n=lay.b_n)


def _scale(a):
    r = np.sqrt(np.asarray(a, dtype=float))
    return r[..., :, None] * r[..., None, :]


def bias_terms(a, B_model, C, v, layout, m, b_n=None):
    """Bias terms ``(E_m, F_m, G_m)`` of block ``m``.

    ``E_m = tr(S(B)^{-1} S(C)) - (c/2) tr(A (C - B) A (A B A)^{-1/2})``,
    ``F_m = log det S(B) - c tr((A B A)^{1/2})`` and ``G_m = E_m + F_m``,
    with ``A = diag(sqrt(a))`` and ``c = T b_n^{1/2} / l_n``.
    When ``a`` is zero the trace terms vanish.

    Raises
    ------
    NotPD
    """
    b_n = layout.b_n if b_n is None else b_n
    geom = BlockGeometry.from_layout(layout, m)
    B_model = np.atleast_2d(np.asarray(B_model, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    cov = _factor(assemble_matrix(B_model, v, geom), m)
    SC = assemble_matrix(C, v, geom)
    tr_term = float(np.sum(cov.inverse() * SC))
    coef = layout.T * math.sqrt(b_n) / layout.n_blocks
    A = np.diag(np.sqrt(np.asarray(a, dtype=float)))
    D = A @ B_model @ A
    if np.any(np.asarray(a) > 0):
        pos = np.asarray(a) > 0
        Dp = D[np.ix_(pos, pos)]
        diff = (A @ (C - B_model) @ A)[np.ix_(pos, pos)]
        e_corr = np.trace(diff @ sym_inv_sqrt(Dp))
        f_corr = np.trace(sym_sqrt(Dp))
    else:
        e_corr = f_corr = 0.0
    E = tr_term - 0.5 * coef * e_corr
    F = cov.logdet() - coef * f_corr
    return E, F, E + F


def _checks_model(model, theta, system, pre):
    Sig = model.eval(system.t_in, system.x_in, theta)
    if pre.B.shape[0] != Sig.shape[0]:
        raise ValueError("pre-averaged estimates do not match the block system")
    return Sig


def check_objective(model, theta, v_hat, system, pre, gradient=True, verify=True):
    """Bias-corrected quasi-log-likelihood.

    Evaluates ``-sum_m [ tr(S_m^{-1}(Z Z^T - S_m(B_m)))/2
    + (c/4) tr((Dhat + Dhat_dag) Dhat^{-1/2}) ]`` with ``c = T b_n^{1/2} / l_n``,
    and, when ``verify`` is set, the definitional form
    ``H_n + sum_m G_m / 2`` through :func:`bias_terms`-style pieces.

    Parameters
    ----------
    model : VolatilityModel
    theta : ndarray
    v_hat : ndarray
    system : BlockSystem
        Built with ``min_count=2``.
    pre : PreAveraged
        From :func:`preaverage` on the same system.

    Returns
    -------
    ObjectiveEval
        ``diagnostics["definitional"]`` holds the definitional value when verified.

    Raises
    ------
    NotPD
    SimplificationMismatch
        If the two forms differ by more than ``1e-8 (1 + |value|)``.
    """
    lay = system.layout
    coef = lay.T * math.sqrt(pre.b_n) / lay.n_blocks
    Sig = _checks_model(model, theta, system, pre)
    scale = _scale(pre.a_hat)
    D = Sig * scale
    Ddag = pre.B * scale
    for i, m in enumerate(pre.blocks):
        if np.linalg.eigvalsh(D[i])[0] <= 0:
            raise NotPD("scaled model matrix is not positive definite", block=m)
    fval, fgrad, _ = batched_sqrt_terms(D, Ddag)
    parts, defs = [], []
    grads = np.zeros_like(Sig)
    for i, (geom, z) in enumerate(zip(system.blocks, system.z)):
        cov = _factor(assemble_matrix(Sig[i], v_hat, geom), geom.m)
        Sinv = cov.inverse()
        SC = assemble_matrix(pre.B[i], v_hat, geom)
        alpha = cov.solve(z)
        quad_z = float(alpha @ z)
        tr_c = float(np.sum(Sinv * SC))
        parts.append(-0.5 * (quad_z - tr_c) - 0.25 * coef * fval[i])
        if verify:
            h_m = -0.5 * (quad_z + cov.logdet())
            _, _, G_m = _bias_from_parts(Sig[i], pre.B[i], pre.a_hat[i], cov.logdet(), tr_c, coef)
            defs.append(h_m + 0.5 * G_m)
        if gradient:
            K = np.outer(alpha, alpha) - Sinv @ SC @ Sinv
            grads[i] = 0.5 * geom.pattern_sums(K) - 0.25 * coef * fgrad[i] * scale[i]
    value = math.fsum(parts)
    out = ObjectiveEval(value=value, grad_sigma=grads,
                        diagnostics={"skipped": list(system.skipped), "coef": coef})
    if verify:
        definitional = math.fsum(defs)
        out.diagnostics["definitional"] = definitional
        if abs(definitional - value) > SIMPLIFICATION_RTOL * (1.0 + abs(value)):
            raise SimplificationMismatch(f"definitional {definitional!r} vs simplified {value!r}")
    if gradient:
        out.grad_theta = model.vjp(system.t_in, system.x_in, theta, grads)
    return out


def _bias_from_parts(B_model, C, a, logdet_s, tr_sinv_sc, coef):
    """``(E, F, G)`` given ``log det S(B)`` and ``tr(S(B)^{-1} S(C))``."""
    A = np.diag(np.sqrt(a))
    D = A @ B_model @ A
    E = tr_sinv_sc - 0.5 * coef * np.trace(A @ (C - B_model) @ A @ sym_inv_sqrt(D))
    F = logdet_s - coef * np.trace(sym_sqrt(D))
    return E, F, E + F


def dot_objective(model, theta, pre, gradient=True):
    """Fast objective ``-(T / (4 l_n)) sum_m tr((Dhat_dag + Dhat) Dhat^{-1/2})``.

    The gradient follows from ``d tr(...) = tr(dDhat^{1/2} (I - Dhat^{-1/2} Dhat_dag Dhat^{-1/2}))``
    with ``dDhat^{1/2}`` from the eigenbasis Sylvester identity. Only
    ``dim x dim`` matrices are factored.

    Parameters
    ----------
    model : VolatilityModel
    theta : ndarray
    pre : PreAveraged

    Returns
    -------
    ObjectiveEval
        ``diagnostics["max_factor_size"]`` records the largest factored matrix.

    Raises
    ------
    NotPD
        If some ``Dhat(theta)`` is not positive definite.
    """
    Sig = model.eval(pre.t_in, pre.x_in, theta)
    scale = _scale(pre.a_hat)
    D = Sig * scale
    Ddag = pre.B * scale
    fval, fgrad, min_eig = batched_sqrt_terms(D, Ddag)
    bad = np.flatnonzero(~(min_eig > 0))
    if bad.size:
        raise NotPD("scaled model matrix is not positive definite", block=pre.blocks[bad[0]])
    coef = pre.T / (4.0 * pre.n_blocks)
    value = -coef * math.fsum(fval)
    grads = -coef * fgrad * scale
    out = ObjectiveEval(value=value, grad_sigma=grads,
                        diagnostics={"max_factor_size": D.shape[1], "min_eig": float(min_eig.min())})
    if gradient:
        out.grad_theta = model.vjp(pre.t_in, pre.x_in, theta, grads)
    return out
