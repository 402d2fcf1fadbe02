"""
Observation sets, block partitions and per-block bookkeeping.

Each component ``j`` is observed at its own increasing times ``S^j_0 < S^j_1 < ...``
with additive noise. The horizon ``[0, T]`` is cut into ``n_blocks`` equal
half-open blocks ``[s_{m-1}, s_m)``. Inside block ``m`` only increments whose
two endpoints both fall in the block are kept, so an increment straddling a
boundary is dropped.

Blocks are numbered ``m = 1..n_blocks`` throughout the package.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import BadConfig, EmptyBlock, EmptyExplanatoryBlock


@dataclass(frozen=True)
class ObservationSet:
    """Noisy nonsynchronous observations of a ``dim``-dimensional process.

    Parameters
    ----------
    times : tuple of ndarray
        Strictly increasing observation times per component, inside ``[0, T]``.
    values : tuple of ndarray
        Observed values, same lengths as ``times``.
    T : float
        Horizon.
    x_times, x_values : tuple of ndarray, optional
        Explanatory series observed without noise. When absent, models are fed
        ``(t, Y)`` built by :meth:`with_time_state`.
    """

    times: tuple
    values: tuple
    T: float
    x_times: tuple = ()
    x_values: tuple = ()

    def __post_init__(self):
        times = tuple(np.asarray(t, dtype=float) for t in self.times)
        values = tuple(np.asarray(v, dtype=float) for v in self.values)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "x_times", tuple(np.asarray(t, dtype=float) for t in self.x_times))
        object.__setattr__(self, "x_values", tuple(np.asarray(v, dtype=float) for v in self.x_values))
        if len(times) != len(values) or not times:
            raise BadConfig("times and values must list the same, nonzero number of components")
        if self.T <= 0:
            raise BadConfig("T must be positive")
        for k, (t, v) in enumerate(zip(times, values)):
            if t.shape != v.shape or t.ndim != 1:
                raise BadConfig(f"component {k}: times and values must be 1-d of equal length")
            if t.size < 3:
                raise BadConfig(f"component {k}: at least three observations are required")
            if np.any(np.diff(t) <= 0):
                raise BadConfig(f"component {k}: times must be strictly increasing")
            if t[0] < 0 or t[-1] > self.T:
                raise BadConfig(f"component {k}: times must lie in [0, T]")
        if len(self.x_times) != len(self.x_values):
            raise BadConfig("explanatory times and values differ in length")

    @property
    def dim(self):
        return len(self.times)

    @property
    def counts(self):
        """Last observation index ``J_k`` per component (observations are ``0..J_k``)."""
        return np.array([t.size - 1 for t in self.times])

    @property
    def has_explanatory(self):
        return len(self.x_times) > 0

    def with_time_state(self):
        """Copy whose explanatory series is ``X = (t, Y^1, ..., Y^dim)``.

        The time coordinate is recorded at the first component's sampling
        times; each state coordinate uses its own noisy observations.
        """
        xt = (self.times[0],) + self.times
        xv = (self.times[0].copy(),) + self.values
        return ObservationSet(self.times, self.values, self.T, xt, xv)


def tridiag_M(size):
    """Dense ``M(l)``: 2 on the diagonal and -1 on the first off-diagonals."""
    M = 2.0 * np.eye(size)
    if size > 1:
        i = np.arange(size - 1)
        M[i, i + 1] = -1.0
        M[i + 1, i] = -1.0
    return M


def tridiag_M_eigenvalues(size):
    """Eigenvalues ``2 - 2 cos(k pi / (l + 1))`` of ``M(l)``, ascending."""
    k = np.arange(1, size + 1)
    return 2.0 - 2.0 * np.cos(k * np.pi / (size + 1))


@dataclass(frozen=True)
class BlockLayout:
    """Partition of ``[0, T]`` and per-block index bookkeeping.

    Attributes
    ----------
    T : float
    n_blocks : int
        Number of blocks ``l_n``.
    b_n : float
        Frequency scale.
    boundaries : ndarray, shape (n_blocks + 1,)
        ``s_m = m T / n_blocks``.
    K : ndarray, shape (n_blocks + 1, dim)
        ``K[m, j]`` is the number of indices ``i >= 1`` with ``S^j_i < s_m``;
        row 0 is -1.
    k : ndarray, shape (n_blocks, dim)
        ``k[m - 1, j]`` is the increment count of component ``j`` in block ``m``.
    """

    T: float
    n_blocks: int
    b_n: float
    boundaries: np.ndarray
    K: np.ndarray
    k: np.ndarray
    times: tuple = field(repr=False)

    @property
    def dim(self):
        return self.K.shape[1]

    @property
    def k_n(self):
        return self.b_n / self.n_blocks

    def counts(self, m):
        """Increment counts ``k_m^j`` of block ``m`` (1-based)."""
        return self.k[m - 1]

    def empty_blocks(self):
        """Blocks with some component lacking increments."""
        return [m for m in range(1, self.n_blocks + 1) if np.any(self.k[m - 1] == 0)]

    def intervals(self, m, j):
        """Start and end points of the sampling intervals of component ``j`` in block ``m``."""
        start = self.K[m - 1, j] + 1
        kk = self.k[m - 1, j]
        t = self.times[j]
        return t[start:start + kk], t[start + 1:start + 1 + kk]

    def value_slice(self, m, j):
        """Slice of observation indices ``K_{m-1}+1 .. K_{m-1}+1+k_m`` spanning block ``m``."""
        start = self.K[m - 1, j] + 1
        return slice(start, start + self.k[m - 1, j] + 1)


def default_scales(obs, n_blocks=None, b_n=None):
    """Default ``b_n`` (mean ``J_k``) and ``n_blocks`` (``floor(b_n^0.45)``)."""
    if b_n is None:
        b_n = float(np.mean(obs.counts))
    if n_blocks is None:
        n_blocks = int(np.floor(b_n ** 0.45))
    return int(n_blocks), float(b_n)


def build_layout(obs, n_blocks=None, b_n=None):
    """Partition ``[0, T]`` into equal blocks and count increments per block.

    Parameters
    ----------
    obs : ObservationSet
    n_blocks : int, optional
        Defaults to ``floor(b_n ** 0.45)``.
    b_n : float, optional
        Defaults to the mean of ``J_k``.

    Returns
    -------
    BlockLayout
        Blocks where some ``k_m^j = 0`` are listed by
        :meth:`BlockLayout.empty_blocks`; estimation skips them.
    """
    n_blocks, b_n = default_scales(obs, n_blocks, b_n)
    if n_blocks < 1:
        raise BadConfig("at least one block is required")
    if b_n < n_blocks:
        raise BadConfig("b_n must be at least the number of blocks")
    s = obs.T * np.arange(n_blocks + 1) / n_blocks
    K = np.empty((n_blocks + 1, obs.dim), dtype=int)
    for j, t in enumerate(obs.times):
        # left-side search counts S_i < s_m, so a time equal to s_m goes right
        K[:, j] = np.searchsorted(t, s, side="left") - 1
    K[0, :] = -1
    k = np.maximum(K[1:] - K[:-1] - 1, 0)
    return BlockLayout(T=float(obs.T), n_blocks=n_blocks, b_n=b_n, boundaries=s, K=K, k=k,
                       times=obs.times)


def block_increments(obs, layout, m, component=None):
    """Increments ``Z_m`` inside block ``m``.

    Parameters
    ----------
    obs : ObservationSet
    layout : BlockLayout
    m : int
        Block index, 1-based.
    component : int, optional
        Return only this component's increments.

    Returns
    -------
    ndarray
        Stacked component-major vector of length ``sum_j k_m^j``.
    """
    comps = range(obs.dim) if component is None else [component]
    parts = []
    for j in comps:
        if layout.k[m - 1, j] == 0:
            raise EmptyBlock(m, j)
        parts.append(np.diff(obs.values[j][layout.value_slice(m, j)]))
    return np.concatenate(parts)


def overlap_matrix(layout, m, k, l):
    """Matrix of intersection lengths ``|I^k_{i,m} cap I^l_{j,m}|``.

    Returns
    -------
    ndarray, shape (k_m^k, k_m^l)
    """
    sk, ek = layout.intervals(m, k)
    sl, el = layout.intervals(m, l)
    if k == l:
        return np.diag(ek - sk)
    over = np.minimum(ek[:, None], el[None, :]) - np.maximum(sk[:, None], sl[None, :])
    return np.clip(over, 0.0, None)


def local_average_X(layout, obs, m):
    """Componentwise mean of explanatory observations inside block ``m``.

    Raises
    ------
    EmptyExplanatoryBlock
        If a component has no observation in ``[s_{m-1}, s_m)``.
    """
    lo, hi = layout.boundaries[m - 1], layout.boundaries[m]
    out = np.empty(len(obs.x_times))
    for c, (t, v) in enumerate(zip(obs.x_times, obs.x_values)):
        i0, i1 = np.searchsorted(t, [lo, hi], side="left")
        if i1 <= i0:
            raise EmptyExplanatoryBlock(m)
        out[c] = v[i0:i1].mean()
    return out


def estimate_noise_variance(obs, layout):
    """Noise variance ``v_k = (2 J_k)^{-1} sum_{m,l} (Z^k_{m,l})^2`` per component."""
    out = np.zeros(obs.dim)
    for j in range(obs.dim):
        total = 0.0
        for m in range(1, layout.n_blocks + 1):
            if layout.k[m - 1, j] > 0:
                z = np.diff(obs.values[j][layout.value_slice(m, j)])
                total += z @ z
        out[j] = total / (2.0 * obs.counts[j])
    return out
