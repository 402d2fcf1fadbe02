"""
Simulation of latent diffusions, Poisson sampling times and noisy observations.

Paths are generated by Euler steps on a uniform grid with a full-truncation
fix for square-root diffusions; observation values are linear interpolations
of the grid path plus independent Gaussian noise.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BadConfig
from .models import seasonal_factor
from .observation import ObservationSet


@dataclass(frozen=True)
class CIR1D:
    """``dY = (alpha1 - alpha2 Y) dt + sigma sqrt(Y) dW``."""

    alpha1: float = 1.0
    alpha2: float = 1.0
    sigma: float = 1.0
    y0: float = 1.0
    kind: str = "cir1d"

    @property
    def dim(self):
        return 1

    def truth(self, t, y):
        """True co-volatility at states ``y`` of shape ``(N, 1)``."""
        y = np.atleast_2d(y)
        return (self.sigma ** 2 * np.maximum(y[:, 0], 0.0))[:, None, None]


@dataclass(frozen=True)
class CIR2DSeasonal:
    """Two CIR-type components sharing the first Brownian motion, with seasonal scale ``a t^2 + b t + c``."""

    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    alpha4: float = 1.0
    a: float = 1.0
    b: float = -4.0 / 3.0
    c: float = 2.0 / 3.0
    sigma1: float = 1.0
    sigma2: float = float(np.sqrt(0.75))
    sigma3: float = 0.5
    y0: tuple = (1.0, 1.0)
    kind: str = "cir2d"

    @property
    def dim(self):
        return 2

    def truth(self, t, y):
        y = np.maximum(np.atleast_2d(y), 0.0)
        f2 = seasonal_factor(np.atleast_1d(t), self.a, self.b, self.c) ** 2
        r = np.sqrt(y[:, 0] * y[:, 1])
        out = np.empty((y.shape[0], 2, 2))
        out[:, 0, 0] = f2 * self.sigma1 ** 2 * y[:, 0]
        out[:, 0, 1] = out[:, 1, 0] = f2 * self.sigma1 * self.sigma3 * r
        out[:, 1, 1] = f2 * (self.sigma2 ** 2 + self.sigma3 ** 2) * y[:, 1]
        return out


@dataclass(frozen=True)
class ConstantCovariance:
    """Brownian motion with constant covariance ``cov``; used for synthetic checks."""

    cov: tuple = ((1.0,),)
    y0: tuple = (0.0,)
    kind: str = "constant"

    @property
    def dim(self):
        return len(self.cov)

    def truth(self, t, y):
        n = np.atleast_2d(y).shape[0]
        return np.broadcast_to(np.asarray(self.cov, dtype=float), (n, self.dim, self.dim)).copy()


MODEL_KINDS = {"cir1d": CIR1D, "cir2d": CIR2DSeasonal, "constant": ConstantCovariance}


@dataclass(frozen=True)
class PathConfig:
    """Latent path settings.

    Parameters
    ----------
    T : float
    grid_steps : int
        Euler steps on ``[0, T]``.
    model : CIR1D, CIR2DSeasonal or ConstantCovariance
    """

    T: float = 1.0
    grid_steps: int = 100_000
    model: object = field(default_factory=CIR1D)

    def validate(self, expected_obs=None):
        if self.T <= 0:
            raise BadConfig("T must be positive")
        if self.grid_steps < 1:
            raise BadConfig("grid_steps must be positive")
        if expected_obs is not None and self.grid_steps < 10 * expected_obs:
            raise BadConfig("grid_steps must be at least 10 times the expected observation count")
        mdl = self.model
        if isinstance(mdl, CIR1D) and mdl.sigma > 0 and not 2 * mdl.alpha1 > mdl.sigma ** 2:
            raise BadConfig("CIR1D requires 2*alpha1 > sigma^2")
        if isinstance(mdl, ConstantCovariance):
            if np.linalg.eigvalsh(np.asarray(mdl.cov, dtype=float))[0] < 0:
                raise BadConfig("constant covariance must be positive semi-definite")


@dataclass(frozen=True)
class SamplingConfig:
    """Poisson sampling with intensity ``rates[k] * n`` and noise variances ``noise_var``."""

    rates: tuple = (1.0,)
    n: float = 5000
    noise_var: tuple = (0.005,)

    def validate(self):
        if any(r <= 0 for r in self.rates):
            raise BadConfig("rates must be positive")
        if any(v < 0 for v in self.noise_var):
            raise BadConfig("noise variances must be nonnegative")
        if self.n < 1:
            raise BadConfig("n must be at least 1")
        if len(self.rates) != len(self.noise_var):
            raise BadConfig("rates and noise_var must have one entry per component")


@dataclass
class DensePath:
    """Latent path on a uniform grid with its truncation diagnostics."""

    t: np.ndarray
    y: np.ndarray
    truncated_fraction: float = 0.0

    def at(self, times, component):
        return np.interp(times, self.t, self.y[:, component])


def simulate_path(cfg, seed):
    """Euler scheme with full truncation for the configured model.

    Parameters
    ----------
    cfg : PathConfig
    seed : int or numpy.random.SeedSequence

    Returns
    -------
    DensePath
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    N = int(cfg.grid_steps)
    dt = cfg.T / N
    t = np.linspace(0.0, cfg.T, N + 1)
    mdl = cfg.model
    sq = np.sqrt(dt)
    if isinstance(mdl, ConstantCovariance):
        L = _psd_factor(np.asarray(mdl.cov, dtype=float))
        dW = rng.standard_normal((N, mdl.dim)) * sq
        y = np.vstack([np.asarray(mdl.y0, dtype=float), np.asarray(mdl.y0) + np.cumsum(dW @ L.T, axis=0)])
        return DensePath(t=t, y=y)
    if isinstance(mdl, CIR1D):
        dW = rng.standard_normal(N) * sq
        y = np.empty(N + 1)
        y[0] = mdl.y0
        neg = 0
        a1, a2, s = mdl.alpha1, mdl.alpha2, mdl.sigma
        for i in range(N):
            yp = y[i] if y[i] > 0.0 else 0.0
            neg += y[i] < 0.0
            y[i + 1] = y[i] + (a1 - a2 * yp) * dt + s * np.sqrt(yp) * dW[i]
        return DensePath(t=t, y=y[:, None], truncated_fraction=neg / N)
    if isinstance(mdl, CIR2DSeasonal):
        dW = rng.standard_normal((N, 2)) * sq
        f = seasonal_factor(t[:-1], mdl.a, mdl.b, mdl.c)
        y = np.empty((N + 1, 2))
        y[0] = mdl.y0
        neg = 0
        for i in range(N):
            y1 = y[i, 0] if y[i, 0] > 0.0 else 0.0
            y2 = y[i, 1] if y[i, 1] > 0.0 else 0.0
            neg += (y[i, 0] < 0.0) or (y[i, 1] < 0.0)
            r1, r2 = np.sqrt(y1), np.sqrt(y2)
            y[i + 1, 0] = y[i, 0] + (mdl.alpha1 - mdl.alpha3 * y1) * dt + f[i] * mdl.sigma1 * r1 * dW[i, 0]
            y[i + 1, 1] = y[i, 1] + (mdl.alpha2 - mdl.alpha4 * y2) * dt \
                + f[i] * r2 * (mdl.sigma3 * dW[i, 0] + mdl.sigma2 * dW[i, 1])
        return DensePath(t=t, y=y, truncated_fraction=neg / N)
    raise BadConfig(f"unknown model {mdl!r}")


def _psd_factor(A):
    lam, U = np.linalg.eigh(A)
    return U * np.sqrt(np.clip(lam, 0.0, None))


def sample_arrival_times(cfg, T, seed):
    """Poisson sampling times per component.

    Each component starts at 0 and adds arrivals with exponential gaps of
    mean ``1 / (rate * n)`` while they stay strictly below ``T``.

    Returns
    -------
    list of ndarray
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    out = []
    for rate in cfg.rates:
        lam = rate * cfg.n
        expected = lam * T
        chunk = int(expected + 6 * np.sqrt(expected) + 16)
        gaps = rng.exponential(1.0 / lam, size=chunk)
        arr = np.cumsum(gaps)
        while arr[-1] < T:
            more = np.cumsum(rng.exponential(1.0 / lam, size=chunk)) + arr[-1]
            arr = np.concatenate([arr, more])
        out.append(np.concatenate([[0.0], arr[arr < T]]))
    return out


def observe(path, times, noise_var, seed, T=None):
    """Noisy observations ``Y(S_i) + eps_i`` with ``eps_i ~ N(0, v_k)`` independent.

    Returns
    -------
    ObservationSet
    """
    rng = np.random.default_rng(seed)
    vals = []
    for k, tk in enumerate(times):
        clean = path.at(tk, k)
        vals.append(clean + np.sqrt(noise_var[k]) * rng.standard_normal(tk.size))
    return ObservationSet(tuple(times), tuple(vals), float(path.t[-1] if T is None else T))


@dataclass
class SimulatedDataset:
    """Observations together with the latent path and the true co-volatility."""

    obs: ObservationSet
    path: DensePath
    path_cfg: PathConfig
    sampling: SamplingConfig
    seed: int

    def truth(self, t, y):
        return self.path_cfg.model.truth(t, y)

    def true_intensity(self, b_n):
        """Limiting intensities ``a^j = rate_j n / b_n`` for sampling-time scale ``b_n``."""
        return np.asarray(self.sampling.rates, dtype=float) * self.sampling.n / b_n

    def metadata(self):
        mdl = self.path_cfg.model
        return {
            "T": self.path_cfg.T,
            "grid_steps": self.path_cfg.grid_steps,
            "model": asdict(mdl),
            "sampling": asdict(self.sampling),
            "seed": self.seed,
            "counts": [int(c) for c in self.obs.counts],
            "truncated_fraction": self.path.truncated_fraction,
        }


def simulate_dataset(path_cfg, sampling, seed):
    """Simulate a path, its sampling times and noisy observations.

    Three independent streams (path, times, noise) are spawned from ``seed``.
    """
    path_cfg.validate()
    sampling.validate()
    if len(sampling.rates) != path_cfg.model.dim:
        raise BadConfig("sampling rates must match the model dimension")
    s_path, s_times, s_noise = np.random.SeedSequence(seed).spawn(3)
    path = simulate_path(path_cfg, s_path)
    times = sample_arrival_times(sampling, path_cfg.T, s_times)
    obs = observe(path, times, sampling.noise_var, s_noise, T=path_cfg.T)
    return SimulatedDataset(obs=obs, path=path, path_cfg=path_cfg, sampling=sampling, seed=seed)


def model_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "cir1d")
    if kind not in MODEL_KINDS:
        raise BadConfig(f"unknown model kind {kind!r}")
    for key in ("y0", "cov"):
        if key in d and isinstance(d[key], list):
            d[key] = tuple(tuple(r) if isinstance(r, list) else r for r in d[key])
    return MODEL_KINDS[kind](**d)


def write_dataset(obs, csv_path, meta=None):
    """Write observations as CSV with columns ``component,index,time,value`` plus a JSON sidecar."""
    rows = ["component,index,time,value"]
    for k, (t, v) in enumerate(zip(obs.times, obs.values)):
        rows.extend(f"{k},{i},{float(ti)!r},{float(vi)!r}" for i, (ti, vi) in enumerate(zip(t, v)))
    with open(csv_path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    side = {"T": obs.T, "counts": [int(c) for c in obs.counts]}
    side.update(meta or {})
    with open(str(csv_path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def read_dataset(csv_path, T=None):
    """Read the CSV written by :func:`write_dataset`; ``T`` defaults to the sidecar value."""
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    meta = {}
    try:
        with open(str(csv_path) + ".json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    if T is None:
        T = meta.get("T", float(data[:, 2].max()))
    comps = np.unique(data[:, 0]).astype(int)
    times, values = [], []
    for k in comps:
        rows = data[data[:, 0] == k]
        rows = rows[np.argsort(rows[:, 1])]
        times.append(rows[:, 2])
        values.append(rows[:, 3])
    return ObservationSet(tuple(times), tuple(values), float(T)), meta
