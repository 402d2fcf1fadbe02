"""Shared builders and numeric oracles for the test suite."""
import numpy as np

from qlvol.observation import ObservationSet


def random_pd(rng, n, floor=0.5):
    X = rng.normal(size=(n, n))
    return X @ X.T + floor * np.eye(n)


def random_sym(rng, n):
    X = rng.normal(size=(n, n))
    return X + X.T


def make_obs(rng, dim=1, n_obs=55, T=1.0, noise=0.01, cov=None, level=1.0):
    """Noisy Brownian observations at uniform random times, first time 0."""
    cov = np.eye(dim) if cov is None else np.asarray(cov)
    L = np.linalg.cholesky(cov)
    grid = np.linspace(0.0, T, 4001)
    path = np.vstack([np.zeros(dim), np.cumsum(rng.normal(size=(4000, dim)) @ L.T * np.sqrt(T / 4000), axis=0)])
    times, values = [], []
    for k in range(dim):
        t = np.concatenate([[0.0], np.sort(rng.uniform(0.0, T, size=n_obs - 1))])
        times.append(t)
        values.append(np.interp(t, grid, path[:, k]) + np.sqrt(noise) * rng.normal(size=t.size) + level)
    return ObservationSet(tuple(times), tuple(values), T)


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h * (1.0 + abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2 * e[i])
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))



def line_integral(f):
    """``int_R f(t) dt`` for an even scalar integrand, by adaptive quadrature on the half line."""
    from scipy.integrate import quad

    val, _ = quad(f, 0.0, np.inf, epsabs=0.0, epsrel=1e-12, limit=500)
    return 2.0 * val


ACCEPTANCE = {}


def report(criterion, ok, detail):
    """Record and print the verdict of one acceptance criterion."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
