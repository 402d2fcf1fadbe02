"""
Matrix-analysis kernels.

Symmetric square roots and their directional derivatives, the half-Sylvester
operator ``phi``, the quadratic forms ``frak_k1``/``frak_k2`` that enter the
asymptotic variance, and closed-form matrix integrals over the real line.

All functions take small dense symmetric arrays and are pure.
"""
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import BadArity, NotPSD, Singular

TOL_PSD = 1e-10
TOL_PD = 1e-12


@dataclass(frozen=True)
class EigenFactorization:
    """Eigendecomposition ``A = U diag(lam) U^T`` with eigenvalues descending."""

    U: np.ndarray
    lam: np.ndarray

    def reconstruct(self):
        return (self.U * self.lam) @ self.U.T


def _sym(A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return 0.5 * (A + A.T)


def eig_sym(A):
    """Symmetric eigendecomposition with eigenvalues in descending order.

    Parameters
    ----------
    A : array_like, shape (n, n)

    Returns
    -------
    EigenFactorization
    """
    lam, U = np.linalg.eigh(_sym(A))
    return EigenFactorization(U=U[:, ::-1], lam=lam[::-1])


def _norm(A):
    return np.linalg.norm(A, 2) if A.size else 0.0


def _pd_eig(B, name="B"):
    B = _sym(B)
    ef = eig_sym(B)
    if ef.lam[-1] <= TOL_PD * max(_norm(B), 1e-300):
        raise Singular(f"{name} is not strictly positive definite (min eigenvalue {ef.lam[-1]:.3e})")
    return ef


def sym_sqrt(A):
    """Principal square root of a positive semi-definite matrix.

    Eigenvalues in ``[-1e-10*||A||, 0)`` are clamped to zero.

    Parameters
    ----------
    A : array_like, shape (n, n)

    Returns
    -------
    ndarray, shape (n, n)

    Raises
    ------
    NotPSD
        If the smallest eigenvalue is below ``-1e-10*||A||``.
    """
    A = _sym(A)
    ef = eig_sym(A)
    scale = _norm(A)
    if ef.lam.size and ef.lam[-1] < -TOL_PSD * scale:
        raise NotPSD(f"min eigenvalue {ef.lam[-1]:.3e} below tolerance")
    lam = np.where(ef.lam < TOL_PD * scale, np.maximum(ef.lam, 0.0), ef.lam)
    R = (ef.U * np.sqrt(lam)) @ ef.U.T
    return 0.5 * (R + R.T)


def sym_inv_sqrt(A):
    """Inverse principal square root of a strictly positive definite matrix."""
    ef = _pd_eig(A, "A")
    R = (ef.U / np.sqrt(ef.lam)) @ ef.U.T
    return 0.5 * (R + R.T)


def phi(B, A):
    """Solve ``B^{1/2} C + C B^{1/2} = A`` for symmetric ``C``.

    In the eigenbasis of ``B`` the solution is
    ``[U^T C U]_ij = [U^T A U]_ij / (sqrt(l_i) + sqrt(l_j))``.

    Parameters
    ----------
    B : array_like, shape (n, n)
        Strictly positive definite.
    A : array_like, shape (n, n)
        Symmetric right-hand side.

    Returns
    -------
    ndarray, shape (n, n)

    Raises
    ------
    Singular
        If ``B`` is not strictly positive definite.
    """
    ef = _pd_eig(B)
    A = _sym(A)
    root = np.sqrt(ef.lam)
    At = ef.U.T @ A @ ef.U
    C = ef.U @ (At / (root[:, None] + root[None, :])) @ ef.U.T
    C = 0.5 * (C + C.T)
    if __debug__:
        n = A.shape[0]
        bound = 0.5 * np.sqrt(n) * np.sqrt(1.0 / ef.lam[-1]) * _norm(A)
        assert _norm(C) <= bound * (1 + 1e-10) + 1e-300, "phi norm bound violated"
    return C


def sym_sqrt_derivative(A, dA):
    """Directional derivative of ``A^{1/2}`` along ``dA``.

    The derivative ``C`` solves ``C A^{1/2} + A^{1/2} C = dA``.
    """
    return phi(A, dA)


def quartic_integral(x):
    """``(1/pi) * int_R prod_i (t^2 + x_i^2)^{-1} dt`` for 2 to 4 positive ``x_i``.

    Closed forms in the elementary symmetric polynomials ``F^j`` of ``x``:
    ``1/(F^1 F^2)``, ``F^1/(F^3 P)`` and ``(F^1 F^2 - F^3)/(F^4 P)``, with
    ``P`` the product of all pairwise sums.

    Parameters
    ----------
    x : sequence of float, length 2, 3 or 4

    Returns
    -------
    float
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size not in (2, 3, 4):
        raise BadArity(f"expected 2, 3 or 4 values, got {x.size}")
    if np.any(x <= 0):
        raise ValueError("all arguments must be positive")
    F = [sum(np.prod(c) for c in combinations(x, j)) for j in range(1, x.size + 1)]
    if x.size == 2:
        return float(1.0 / (F[0] * F[1]))
    pair = np.prod([a + b for a, b in combinations(x, 2)])
    if x.size == 3:
        return float(F[0] / (F[2] * pair))
    return float((F[0] * F[1] - F[2]) / (F[3] * pair))


def _q3_table(root):
    """``quartic_integral`` on all triples, vectorised."""
    a = root[:, None, None]
    b = root[None, :, None]
    c = root[None, None, :]
    f1 = a + b + c
    f3 = a * b * c
    return f1 / (f3 * (a + b) * (a + c) * (b + c))


def _q4_table(root):
    a = root[:, None, None, None]
    b = root[None, :, None, None]
    c = root[None, None, :, None]
    d = root[None, None, None, :]
    f1 = a + b + c + d
    f2 = a * b + a * c + a * d + b * c + b * d + c * d
    f3 = a * b * c + a * b * d + a * c * d + b * c * d
    f4 = a * b * c * d
    pair = (a + b) * (a + c) * (a + d) * (b + c) * (b + d) * (c + d)
    return (f1 * f2 - f3) / (f4 * pair)


def frak_k1(B, A, C, A2=None):
    """First correction form of the asymptotic variance.

    Equals ``(1/pi) * int_R tr((A R)^2 C R) dt`` with ``R = (t^2 + B)^{-1}``,
    evaluated exactly as a sum over the eigenbasis of ``B``. With ``A2`` given,
    returns the symmetric bilinear form in ``(A, A2)`` whose diagonal is the
    quadratic form.

    Parameters
    ----------
    B : array_like, shape (n, n)
        Strictly positive definite.
    A, C : array_like, shape (n, n)
        Symmetric.
    A2 : array_like, shape (n, n), optional

    Returns
    -------
    float
    """
    ef = _pd_eig(B)
    U = ef.U
    q3 = _q3_table(np.sqrt(ef.lam))
    At = U.T @ _sym(A) @ U
    A2t = At if A2 is None else U.T @ _sym(A2) @ U
    Ct = U.T @ _sym(C) @ U
    val = np.einsum("ij,jk,ki,ijk->", At, A2t, Ct, q3)
    if A2 is not None:
        val = 0.5 * (val + np.einsum("ij,jk,ki,ijk->", A2t, At, Ct, q3))
    return float(val)


def frak_k2(B, A, C, A2=None):
    """Second correction form of the asymptotic variance.

    Equals ``(1/(2 pi)) * int_R tr((A R C R)^2) dt`` with ``R = (t^2 + B)^{-1}``,
    evaluated exactly as a sum over the eigenbasis of ``B``. ``A2`` gives the
    polarised bilinear form as in :func:`frak_k1`.
    """
    ef = _pd_eig(B)
    U = ef.U
    q4 = _q4_table(np.sqrt(ef.lam))
    At = U.T @ _sym(A) @ U
    A2t = At if A2 is None else U.T @ _sym(A2) @ U
    Ct = U.T @ _sym(C) @ U
    val = 0.5 * np.einsum("ij,jk,kl,li,ijkl->", At, Ct, A2t, Ct, q4)
    return float(val)


def inv_residue(C1, C2):
    """``int_R (C1 t^2 + C2)^{-1} dt`` in closed form.

    Returns ``pi * C1^{-1/2} (C1^{-1/2} C2 C1^{-1/2})^{-1/2} C1^{-1/2}``.
    """
    W = sym_inv_sqrt(C1)
    inner = sym_inv_sqrt(W @ _sym(C2) @ W)
    out = np.pi * W @ inner @ W
    return 0.5 * (out + out.T)


def logdet_residue(C1, C2):
    """``int_R (1 + t^2)^{-1} log det(C1 t^2 + C2) dt`` in closed form."""
    W = sym_inv_sqrt(C1)
    inner = sym_sqrt(W @ _sym(C2) @ W)
    n = inner.shape[0]
    _, ld1 = np.linalg.slogdet(_sym(C1))
    _, ld2 = np.linalg.slogdet(np.eye(n) + inner)
    return float(np.pi * ld1 + 2 * np.pi * ld2)


def sqrt_perturbation_bound(A, B):
    """Right-hand side of ``||A - B|| <= sqrt(n) ||(A+B)^{-1}|| ||A^2 - B^2||``.

    Parameters
    ----------
    A, B : array_like, shape (n, n)
        Positive semi-definite with ``A + B`` invertible.

    Returns
    -------
    float
    """
    A = _sym(A)
    B = _sym(B)
    S = A + B
    smin = np.linalg.eigvalsh(S)[0]
    if smin <= TOL_PD * max(_norm(S), 1e-300):
        raise Singular("A + B is singular")
    n = A.shape[0]
    return float(np.sqrt(n) / smin * _norm(A @ A - B @ B))


def batched_sqrt_terms(D, Ddag):
    """Value and gradient of ``f(D) = tr((D + Ddag) D^{-1/2})`` for stacks of matrices.

    Parameters
    ----------
    D : ndarray, shape (M, g, g)
        Positive definite.
    Ddag : ndarray, shape (M, g, g)
        Symmetric, not necessarily definite.

    Returns
    -------
    value : ndarray, shape (M,)
    grad : ndarray, shape (M, g, g)
        ``d f / d D`` under the Frobenius pairing, equal to
        ``phi_D(I - D^{-1/2} Ddag D^{-1/2})``.
    min_eig : ndarray, shape (M,)
    """
    lam, U = np.linalg.eigh(D)
    root = np.sqrt(np.clip(lam, 0.0, None))
    Ut = np.swapaxes(U, 1, 2)
    Dt = Ut @ Ddag @ U
    inv_root = np.where(root > 0, 1.0 / np.where(root > 0, root, 1.0), np.inf)
    value = np.einsum("mii,mi->m", Dt, inv_root) + root.sum(axis=1)
    g = D.shape[1]
    W = np.eye(g)[None] - Dt * inv_root[:, :, None] * inv_root[:, None, :]
    Wt = W / (root[:, :, None] + root[:, None, :])
    grad = U @ Wt @ Ut
    grad = 0.5 * (grad + np.swapaxes(grad, 1, 2))
    return value, grad, lam[:, 0]
