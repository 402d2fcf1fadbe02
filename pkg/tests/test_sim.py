import json

import numpy as np
import pytest

from qlvol.errors import BadConfig
from qlvol.sim import (CIR1D, CIR2DSeasonal, ConstantCovariance, DensePath, PathConfig, SamplingConfig,
                       model_from_dict, observe, read_dataset, sample_arrival_times, simulate_dataset,
                       simulate_path, write_dataset)


class TestSimulatePath:
    def test_constant_path(self):
        path = simulate_path(PathConfig(T=1.0, grid_steps=100, model=CIR1D(0.0, 0.0, 0.0, 1.0)), 0)
        np.testing.assert_array_equal(path.y[:, 0], 1.0)

    def test_cir_mean(self):
        # y0 equals the stationary mean, so E[Y_T] = 1 for every horizon
        cfg = PathConfig(T=1.0, grid_steps=200, model=CIR1D())
        ends = np.array([simulate_path(cfg, s).y[-1, 0] for s in range(10_000)])
        se = ends.std(ddof=1) / np.sqrt(ends.size)
        assert abs(ends.mean() - 1.0) <= 3 * se

    def test_truncation_rare(self):
        n = 5000
        path = simulate_path(PathConfig(T=1.0, grid_steps=20 * n, model=CIR1D()), 7)
        assert path.truncated_fraction < 0.01
        assert path.y.shape == (20 * n + 1, 1)

    def test_seasonal_scale(self):
        m = CIR2DSeasonal()
        S = m.truth(np.array([0.0]), np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(S[0], (2 / 3) ** 2 * np.array([[1.0, 0.5], [0.5, 1.0]]), atol=1e-15)
        path = simulate_path(PathConfig(T=1.0, grid_steps=1000, model=m), 1)
        assert path.y.shape == (1001, 2)

    def test_constant_covariance_increments(self, rng):
        cov = ((1.0, 0.6), (0.6, 0.5))
        path = simulate_path(PathConfig(T=1.0, grid_steps=200_000, model=ConstantCovariance(cov, (0.0, 0.0))), 3)
        d = np.diff(path.y, axis=0)
        np.testing.assert_allclose(d.T @ d, cov, atol=0.02)

    def test_invalid(self):
        with pytest.raises(BadConfig):
            PathConfig(model=CIR1D(alpha1=0.1, sigma=1.0)).validate()
        with pytest.raises(BadConfig):
            PathConfig(T=-1.0).validate()
        with pytest.raises(BadConfig):
            PathConfig(grid_steps=100).validate(expected_obs=50)
        with pytest.raises(BadConfig):
            PathConfig(model=ConstantCovariance(((1.0, 2.0), (2.0, 1.0)), (0.0, 0.0))).validate()


class TestArrivals:
    def test_count(self):
        cfg = SamplingConfig(rates=(1.0,), n=5000, noise_var=(0.0,))
        for seed in range(5):
            t = sample_arrival_times(cfg, 1.0, seed)[0]
            assert abs(t.size - 1 - 5000) <= 4 * np.sqrt(5000)

    def test_structure(self):
        cfg = SamplingConfig(rates=(1.0, 0.5), n=300, noise_var=(0.0, 0.0))
        for t in sample_arrival_times(cfg, 2.0, 4):
            assert t[0] == 0.0 and t[-1] < 2.0
            assert np.all(np.diff(t) > 0)

    def test_exponential_gaps(self):
        cfg = SamplingConfig(rates=(2.0,), n=10_000, noise_var=(0.0,))
        gaps = np.diff(sample_arrival_times(cfg, 1.0, 5)[0])
        assert gaps.mean() == pytest.approx(1 / 20_000, rel=0.03)
        assert gaps.std() == pytest.approx(1 / 20_000, rel=0.05)

    def test_deterministic(self):
        cfg = SamplingConfig(rates=(1.0,), n=100, noise_var=(0.0,))
        np.testing.assert_array_equal(sample_arrival_times(cfg, 1.0, 9)[0], sample_arrival_times(cfg, 1.0, 9)[0])

    def test_invalid(self):
        with pytest.raises(BadConfig):
            SamplingConfig(rates=(0.0,)).validate()
        with pytest.raises(BadConfig):
            SamplingConfig(rates=(1.0,), noise_var=(-1.0,)).validate()
        with pytest.raises(BadConfig):
            SamplingConfig(rates=(1.0, 1.0), noise_var=(0.1,)).validate()


class TestObserve:
    def path(self):
        t = np.linspace(0, 1, 1001)
        return DensePath(t=t, y=np.sin(t)[:, None])

    def test_exact_without_noise(self):
        times = [np.linspace(0, 1, 17)]
        obs = observe(self.path(), times, [0.0], 0)
        np.testing.assert_allclose(obs.values[0], np.sin(times[0]), atol=1e-6)

    def test_noise_variance(self):
        times = [np.sort(np.random.default_rng(0).uniform(0, 1, 100_000))]
        obs = observe(self.path(), times, [0.005], 1)
        resid = obs.values[0] - self.path().at(times[0], 0)
        assert resid.var() == pytest.approx(0.005, rel=0.05)

    def test_increment_variance(self):
        # synchronous equidistant data: Var(Z) = Sigma * delta + 2 v
        cfg = PathConfig(T=1.0, grid_steps=100_000, model=ConstantCovariance(((2.0,),), (0.0,)))
        data = simulate_dataset(cfg, SamplingConfig(rates=(1.0,), n=2000, noise_var=(0.01,)), 11)
        z = np.diff(data.obs.values[0])
        dt = np.diff(data.obs.times[0])
        expected = np.mean(2.0 * dt) + 0.02
        assert z.var() == pytest.approx(expected, rel=4 * np.sqrt(2 / z.size))


class TestDataset:
    def cfgs(self):
        return PathConfig(T=1.0, grid_steps=4000, model=CIR1D()), SamplingConfig(rates=(1.0,), n=200, noise_var=(0.005,))

    def test_deterministic(self):
        a = simulate_dataset(*self.cfgs(), seed=5)
        b = simulate_dataset(*self.cfgs(), seed=5)
        c = simulate_dataset(*self.cfgs(), seed=6)
        np.testing.assert_array_equal(a.obs.values[0], b.obs.values[0])
        np.testing.assert_array_equal(a.obs.times[0], b.obs.times[0])
        assert not np.array_equal(a.obs.values[0][:10], c.obs.values[0][:10])

    def test_metadata(self):
        d = simulate_dataset(*self.cfgs(), seed=5)
        meta = d.metadata()
        assert meta["counts"] == [int(d.obs.counts[0])]
        assert meta["model"]["kind"] == "cir1d"
        json.dumps(meta)
        np.testing.assert_allclose(d.true_intensity(200.0), [1.0])

    def test_dimension_mismatch(self):
        p, _ = self.cfgs()
        with pytest.raises(BadConfig):
            simulate_dataset(p, SamplingConfig(rates=(1.0, 1.0), n=10, noise_var=(0.0, 0.0)), 0)

    def test_round_trip(self, tmp_path):
        d = simulate_dataset(*self.cfgs(), seed=5)
        path = tmp_path / "data.csv"
        write_dataset(d.obs, path, d.metadata())
        obs, meta = read_dataset(path)
        np.testing.assert_array_equal(obs.times[0], d.obs.times[0])
        np.testing.assert_array_equal(obs.values[0], d.obs.values[0])
        assert obs.T == 1.0 and meta["seed"] == 5
        header = path.read_text().splitlines()[0]
        assert header == "component,index,time,value"

    def test_model_from_dict(self):
        m = model_from_dict({"kind": "constant", "cov": [[1.0, 0.2], [0.2, 1.0]], "y0": [0.0, 0.0]})
        assert m.dim == 2 and m.cov[0][1] == 0.2
        assert model_from_dict({"kind": "cir2d"}) == CIR2DSeasonal()
        with pytest.raises(BadConfig):
            model_from_dict({"kind": "heston"})
