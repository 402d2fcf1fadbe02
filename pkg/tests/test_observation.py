import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_obs
from qlvol.errors import BadConfig, EmptyBlock, EmptyExplanatoryBlock
from qlvol.observation import (ObservationSet, block_increments, build_layout, default_scales,
                               estimate_noise_variance, local_average_X, overlap_matrix, tridiag_M,
                               tridiag_M_eigenvalues)


def equidistant(n, dim=1, values=None):
    t = np.arange(n + 1) / n
    vals = values if values is not None else [np.zeros(n + 1)] * dim
    return ObservationSet(tuple([t] * dim), tuple(vals), 1.0)


def random_obs(seed, dim, n_max=80):
    r = np.random.default_rng(seed)
    times, values = [], []
    for _ in range(dim):
        n = int(r.integers(3, n_max))
        t = np.unique(np.round(r.uniform(0, 1, size=n), 6))
        if t.size < 3:
            t = np.array([0.1, 0.5, 0.9])
        times.append(t)
        values.append(r.normal(size=t.size))
    return ObservationSet(tuple(times), tuple(values), 1.0)


class TestObservationSet:
    def test_counts(self):
        obs = equidistant(12, dim=2)
        np.testing.assert_array_equal(obs.counts, [12, 12])
        assert obs.dim == 2

    @pytest.mark.parametrize("times", [[0.0, 0.5, 0.5], [0.0, 0.5], [0.0, 0.5, 1.5], [-0.1, 0.2, 0.3]])
    def test_invalid(self, times):
        with pytest.raises(BadConfig):
            ObservationSet((np.array(times),), (np.zeros(len(times)),), 1.0)

    def test_time_state(self):
        obs = equidistant(12, dim=2).with_time_state()
        assert obs.has_explanatory and len(obs.x_times) == 3
        np.testing.assert_array_equal(obs.x_values[0], obs.times[0])


class TestTridiag:
    @pytest.mark.parametrize("size", [1, 2, 5, 30])
    def test_eigenvalues(self, size):
        np.testing.assert_allclose(np.linalg.eigvalsh(tridiag_M(size)), tridiag_M_eigenvalues(size),
                                   atol=1e-12)
        assert tridiag_M_eigenvalues(size).min() > 0

    def test_pattern(self):
        np.testing.assert_array_equal(tridiag_M(3), [[2, -1, 0], [-1, 2, -1], [0, -1, 2]])


class TestLayout:
    def test_equidistant_count(self):
        # n=12, three blocks: each block holds four points and three inner increments
        layout = build_layout(equidistant(12), n_blocks=3, b_n=12)
        np.testing.assert_array_equal(layout.k[:, 0], [3, 3, 3])
        np.testing.assert_array_equal(layout.K[:, 0], [-1, 3, 7, 11])

    def test_single_block_without_final_point(self):
        obs = ObservationSet((np.array([0.0, 0.2, 0.5, 0.7]),), (np.zeros(4),), 1.0)
        layout = build_layout(obs, n_blocks=1, b_n=3)
        assert layout.k[0, 0] == obs.counts[0]

    def test_single_block_with_final_point(self):
        obs = ObservationSet((np.array([0.0, 0.2, 0.5, 1.0]),), (np.zeros(4),), 1.0)
        layout = build_layout(obs, n_blocks=1, b_n=3)
        # the observation at T falls outside the half-open block
        assert layout.k[0, 0] == obs.counts[0] - 1

    def test_default_scales(self, rng):
        obs = make_obs(rng, dim=2, n_obs=5001)
        n_blocks, b_n = default_scales(obs)
        assert b_n == 5000.0
        assert n_blocks == int(5000 ** 0.45) == 46

    def test_poisson_mean_count(self, rng):
        t = np.sort(rng.uniform(0, 1, size=5000))
        obs = ObservationSet((t,), (np.zeros(t.size),), 1.0)
        layout = build_layout(obs)
        assert layout.n_blocks == 46
        assert abs(layout.k.mean() - 5000 / 46) < 2

    def test_boundary_ties_go_right(self):
        t = np.array([0.0, 0.25, 0.5, 0.75, 0.9])
        layout = build_layout(ObservationSet((t,), (np.zeros(5),), 1.0), n_blocks=2, b_n=4)
        assert layout.intervals(2, 0)[0][0] == 0.5

    def test_bad_blocks(self):
        with pytest.raises(BadConfig):
            build_layout(equidistant(12), n_blocks=20, b_n=12)

    def test_empty_blocks_reported(self):
        t = np.array([0.0, 0.1, 0.2, 0.3, 0.9])
        layout = build_layout(ObservationSet((t,), (np.zeros(5),), 1.0), n_blocks=4, b_n=4)
        assert layout.empty_blocks() == [2, 3, 4]
        with pytest.raises(EmptyBlock):
            block_increments(ObservationSet((t,), (np.zeros(5),), 1.0), layout, 3)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 6))
    def test_bookkeeping(self, seed, dim, n_blocks):
        obs = random_obs(seed, dim)
        layout = build_layout(obs, n_blocks=n_blocks, b_n=max(n_blocks, 3))
        assert np.all(layout.k >= 0)
        for j in range(dim):
            t = obs.times[j]
            total = 0
            for m in range(1, n_blocks + 1):
                lo, hi = layout.boundaries[m - 1], layout.boundaries[m]
                s, e = layout.intervals(m, j)
                assert np.all(e > s)
                assert np.all(s >= lo) and np.all(e < hi)
                # brute force: increments with both endpoints in [lo, hi)
                inside = (t[:-1] >= lo) & (t[1:] < hi)
                assert layout.k[m - 1, j] == inside.sum()
                total += layout.k[m - 1, j]
            assert total <= obs.counts[j]


class TestIncrements:
    def test_constant(self):
        obs = equidistant(12, values=[np.full(13, 3.0)])
        layout = build_layout(obs, 3, 12)
        np.testing.assert_array_equal(block_increments(obs, layout, 2), np.zeros(3))

    def test_simple(self):
        obs = ObservationSet((np.array([0.0, 0.3, 0.6]),), (np.array([0.0, 1.0, 3.0]),), 1.0)
        layout = build_layout(obs, 1, 2)
        np.testing.assert_array_equal(block_increments(obs, layout, 1), [1.0, 2.0])

    def test_telescoping(self, rng):
        obs = make_obs(rng, dim=2, n_obs=80)
        layout = build_layout(obs, 4, 40)
        for m in range(1, 5):
            for j in range(2):
                sl = layout.value_slice(m, j)
                span = obs.values[j][sl][-1] - obs.values[j][sl][0]
                assert block_increments(obs, layout, m, j).sum() == pytest.approx(span, abs=1e-12)
            z = block_increments(obs, layout, m)
            assert z.size == layout.counts(m).sum()


class TestOverlap:
    def test_hand_example(self):
        t1 = np.array([0.0, 2.0, 4.0, 9.0])
        t2 = np.array([1.0, 3.0, 9.5])
        obs = ObservationSet((t1, t2), (np.zeros(4), np.zeros(3)), 10.0)
        layout = build_layout(obs, 1, 3)
        G = overlap_matrix(layout, 1, 0, 1)
        np.testing.assert_allclose(G[:2, 0], [1.0, 1.0])

    def test_identical_grids(self):
        obs = equidistant(12, dim=2)
        layout = build_layout(obs, 3, 12)
        np.testing.assert_allclose(overlap_matrix(layout, 1, 0, 1), np.eye(3) / 12)
        np.testing.assert_allclose(overlap_matrix(layout, 1, 0, 0), np.eye(3) / 12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4))
    def test_sums(self, seed, n_blocks):
        obs = random_obs(seed, 2)
        layout = build_layout(obs, n_blocks, max(n_blocks, 3))
        for m in range(1, n_blocks + 1):
            if np.any(layout.k[m - 1] == 0):
                continue
            G = overlap_matrix(layout, m, 0, 1)
            s0, e0 = layout.intervals(m, 0)
            s1, e1 = layout.intervals(m, 1)
            lo1, hi1 = s1[0], e1[-1]
            clipped = np.clip(np.minimum(e0, hi1) - np.maximum(s0, lo1), 0, None)
            np.testing.assert_allclose(G.sum(axis=1), clipped, atol=1e-12)
            assert np.all(G.sum(axis=1) <= layout.boundaries[m] - layout.boundaries[m - 1] + 1e-12)


class TestLocalAverage:
    def test_values(self):
        t = np.array([0.0, 0.2, 0.4, 0.6, 0.8])
        obs = ObservationSet((t,), (np.zeros(5),), 1.0, (np.array([0.1, 0.3, 0.7]),), (np.array([1.0, 3.0, 5.0]),))
        layout = build_layout(obs, 2, 4)
        assert local_average_X(layout, obs, 1)[0] == 2.0
        assert local_average_X(layout, obs, 2)[0] == 5.0

    def test_time_coordinate(self, rng):
        obs = make_obs(rng, n_obs=60).with_time_state()
        layout = build_layout(obs, 3, 59)
        t = obs.times[0]
        for m in (1, 2, 3):
            lo, hi = layout.boundaries[m - 1:m + 1]
            assert local_average_X(layout, obs, m)[0] == pytest.approx(t[(t >= lo) & (t < hi)].mean())

    def test_empty(self):
        t = np.array([0.0, 0.2, 0.4, 0.6, 0.8])
        obs = ObservationSet((t,), (np.zeros(5),), 1.0, (np.array([0.1]),), (np.array([1.0]),))
        with pytest.raises(EmptyExplanatoryBlock):
            local_average_X(build_layout(obs, 2, 4), obs, 2)


class TestNoiseVariance:
    def test_zero_data(self):
        obs = equidistant(12)
        assert estimate_noise_variance(obs, build_layout(obs, 3, 12))[0] == 0.0

    def test_pure_noise(self, rng):
        J = 100_000
        obs = equidistant(J, values=[rng.normal(size=J + 1)])
        layout = build_layout(obs)
        v = estimate_noise_variance(obs, layout)[0]
        # boundary drops lose l_n of J increments
        assert abs(v - 1.0) <= 3 * np.sqrt(2.0 / J) + layout.n_blocks / J

    def test_formula(self, rng):
        obs = make_obs(rng, dim=2, n_obs=40)
        layout = build_layout(obs, 3, 39)
        v = estimate_noise_variance(obs, layout)
        for j in range(2):
            z = np.concatenate([block_increments(obs, layout, m, j) for m in (1, 2, 3)])
            assert v[j] == pytest.approx(z @ z / (2 * obs.counts[j]), rel=1e-14)
