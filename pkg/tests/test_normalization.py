import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stta.normalization import (
    ChannelStats,
    EmaNormState,
    MemoryNormState,
    StateError,
    batch_channel_stats,
    corrected_stats,
    normalize,
    sampling_variances,
    soft_shrinkage,
)

from oracles import corrected_stats_mp, normalize_mp, sampling_variances_mp, soft_shrinkage_mp


def populated_state(var, extent=8, count=16, alpha=4.0, mean=None):
    var = np.asarray(var, dtype=np.float64)
    mean = np.zeros_like(var) if mean is None else np.asarray(mean, dtype=np.float64)
    state = MemoryNormState(alpha=alpha)
    state.populate(ChannelStats(mean, var), extent, count)
    return state


class TestSamplingVariances:
    def test_zero_memory_variance(self):
        s2m, s2v = sampling_variances(populated_state([0.0, 0.0]))
        assert np.array_equal(s2m, [0.0, 0.0])
        assert np.array_equal(s2v, [0.0, 0.0])

    def test_direct_evaluation(self):
        s2m, s2v = sampling_variances(populated_state([4.0], extent=8, count=16))
        assert s2m[0] == pytest.approx(0.03125, abs=1e-15)          # 4 / 128
        assert s2v[0] == pytest.approx(32.0 / 127.0, abs=1e-12)     # 2*16 / 127

    def test_matches_extended_precision_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            var = rng.uniform(0.0, 10.0, size=6)
            extent = int(rng.integers(1, 12))
            count = int(rng.integers(2, 40))
            s2m, s2v = sampling_variances(populated_state(var, extent, count))
            want_m, want_v = sampling_variances_mp(var, extent, count)
            assert np.max(np.abs(s2m - want_m)) < 1e-12
            assert np.max(np.abs(s2v - want_v)) < 1e-12

    def test_degenerate_denominator(self):
        with pytest.raises(ValueError):
            sampling_variances(populated_state([1.0], extent=1, count=1))

    def test_unpopulated(self):
        with pytest.raises(StateError):
            sampling_variances(MemoryNormState())


class TestSoftShrinkage:
    def test_inside_dead_zone(self):
        assert soft_shrinkage(0.5, 1.0) == 0.0

    def test_direct(self):
        assert soft_shrinkage(3.0, 1.0) == 2.0

    def test_odd_symmetry(self):
        assert soft_shrinkage(-3.0, 1.0) == -2.0

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            soft_shrinkage(1.0, -0.1)
        with pytest.raises(ValueError):
            soft_shrinkage(np.ones(3), np.array([0.1, -0.2, 0.3]))

    def test_elementwise_with_per_element_threshold(self):
        out = soft_shrinkage(np.array([3.0, -3.0, 0.2]), np.array([1.0, 2.0, 0.5]))
        assert np.array_equal(out, [2.0, -1.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1e6, 1e6), st.floats(0, 1e6))
    def test_properties(self, x, lam):
        out = soft_shrinkage(x, lam)
        assert out == -soft_shrinkage(-x, lam)            # odd
        assert abs(out) <= abs(x) or x == 0.0             # shrinks
        assert out == pytest.approx(soft_shrinkage_mp(x, lam), abs=1e-9)


class TestCorrectedStats:
    def test_live_equals_memory_is_identity(self):
        state = populated_state([2.0, 3.0], mean=[1.0, -1.0])
        live = state.memory_stats.copy()
        out = corrected_stats(state, live)
        assert np.array_equal(out.mean, live.mean)
        assert np.array_equal(out.var, live.var)

    def test_dead_zone_pins_to_memory(self):
        state = populated_state([4.0], extent=8, count=16, alpha=4.0, mean=[0.0])
        lam = 4.0 * np.sqrt(4.0 / 128.0)
        live = ChannelStats([lam * 0.99], [4.0])
        out = corrected_stats(state, live)
        assert out.mean[0] == 0.0

    def test_outside_dead_zone_lands_lambda_from_live(self):
        state = populated_state([4.0], extent=8, count=16, alpha=4.0, mean=[0.0])
        lam = 4.0 * np.sqrt(4.0 / 128.0)
        live = ChannelStats([3.0], [4.0])
        out = corrected_stats(state, live)
        assert out.mean[0] == pytest.approx(3.0 - lam, abs=1e-15)

    def test_matches_extended_precision_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            channels = 5
            mem_mean = rng.normal(size=channels)
            mem_var = rng.uniform(0.01, 5.0, size=channels)
            live_mean = rng.normal(size=channels)
            live_var = rng.uniform(0.0, 5.0, size=channels)
            alpha = float(rng.uniform(0.0, 8.0))
            state = populated_state(mem_var, extent=4, count=9, alpha=alpha, mean=mem_mean)
            out = corrected_stats(state, ChannelStats(live_mean, live_var))
            want_mean, want_var = corrected_stats_mp(
                mem_mean, mem_var, live_mean, live_var, 4, 9, alpha)
            assert np.max(np.abs(out.mean - want_mean)) < 1e-10
            assert np.max(np.abs(out.var - want_var)) < 1e-10

    def test_variance_clamped_at_zero(self):
        # tiny memory variance, much smaller live variance: raw shrinkage
        # could go negative, the result must not
        state = populated_state([1e-4], extent=2, count=2, alpha=0.0, mean=[0.0])
        out = corrected_stats(state, ChannelStats([0.0], [0.0]))
        assert out.var[0] >= 0.0

    def test_saturation_bound(self):
        # corrected mean never ends farther than lambda from the live mean
        rng = np.random.default_rng(2)
        for _ in range(200):
            mem_var = rng.uniform(0.0, 4.0, size=3)
            state = populated_state(mem_var, extent=3, count=7,
                                    alpha=float(rng.uniform(0, 6)),
                                    mean=rng.normal(size=3))
            live = ChannelStats(rng.normal(size=3), rng.uniform(0, 4, size=3))
            out = corrected_stats(state, live)
            lam = state.alpha * np.sqrt(sampling_variances(state)[0])
            assert np.all(np.abs(out.mean - live.mean) <= lam + 1e-12)

    def test_monotone_in_live_mean(self):
        state = populated_state([2.0], extent=8, count=16, alpha=4.0, mean=[0.5])
        grid = np.linspace(-5.0, 5.0, 401)
        outs = [corrected_stats(state, ChannelStats([g], [2.0])).mean[0] for g in grid]
        assert all(b - a >= -1e-12 for a, b in zip(outs, outs[1:]))


class TestNormalize:
    def test_alpha_zero_equals_batch_norm(self):
        rng = np.random.default_rng(3)
        f = rng.normal(1.5, 2.0, size=(6, 4, 5))
        gamma, beta = rng.normal(size=4), rng.normal(size=4)
        state = populated_state(rng.uniform(0.5, 2.0, size=4), extent=5, count=9,
                                alpha=0.0, mean=rng.normal(size=4))
        got = normalize(state, f, gamma, beta, 1e-5)
        live = batch_channel_stats(f)
        want = gamma.reshape(1, -1, 1) * (f - live.mean.reshape(1, -1, 1)) \
            / np.sqrt(live.var + 1e-5).reshape(1, -1, 1) + beta.reshape(1, -1, 1)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_huge_alpha_equals_memory_norm(self):
        rng = np.random.default_rng(4)
        f = rng.normal(0.0, 3.0, size=(5, 3, 4))
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        mem_mean, mem_var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        state = populated_state(mem_var, extent=4, count=8, alpha=1e9, mean=mem_mean)
        got = normalize(state, f, gamma, beta, 1e-5)
        want = gamma.reshape(1, -1, 1) * (f - mem_mean.reshape(1, -1, 1)) \
            / np.sqrt(mem_var + 1e-5).reshape(1, -1, 1) + beta.reshape(1, -1, 1)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_dead_zone_fixed_point_bit_identical(self):
        # live within the dead zone on every channel: output must equal raw
        # memory-stat normalization exactly
        rng = np.random.default_rng(5)
        mem_var = rng.uniform(1.0, 2.0, size=3)
        mem_mean = rng.normal(size=3)
        state = populated_state(mem_var, extent=1000, count=1000, alpha=1e6, mean=mem_mean)
        f = rng.normal(size=(4, 3, 6)) * 0.01 + mem_mean.reshape(1, -1, 1)
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        got = normalize(state, f, gamma, beta, 1e-5)
        # same affine arithmetic, raw memory stats substituted for corrected
        scale = 1.0 / np.sqrt(mem_var + 1e-5).reshape(1, -1, 1)
        want = gamma.reshape(1, -1, 1) * (f - mem_mean.reshape(1, -1, 1)) * scale + beta.reshape(1, -1, 1)
        assert np.array_equal(got, want)

    def test_matches_extended_precision_oracle(self):
        rng = np.random.default_rng(6)
        f = rng.normal(0.5, 1.5, size=(3, 4, 2))
        gamma, beta = rng.normal(size=4), rng.normal(size=4)
        mem_mean, mem_var = rng.normal(size=4), rng.uniform(0.1, 3.0, size=4)
        state = populated_state(mem_var, extent=2, count=5, alpha=2.0, mean=mem_mean)
        got = normalize(state, f, gamma, beta, 1e-5)
        want = np.array(normalize_mp(f.tolist(), list(mem_mean), list(mem_var),
                                     2, 5, 2.0, list(gamma), list(beta), 1e-5))
        assert np.max(np.abs(got - want)) < 1e-10

    def test_unpopulated_state_errors(self):
        with pytest.raises(StateError):
            normalize(MemoryNormState(), np.zeros((2, 3, 4)), np.ones(3), np.zeros(3), 1e-5)


class TestEmaNormState:
    def test_first_batch_initializes(self):
        ema = EmaNormState(momentum=0.9)
        stats = ChannelStats([1.0, 2.0], [0.5, 0.25])
        out = ema.update(stats)
        assert np.array_equal(out.mean, stats.mean)
        assert np.array_equal(out.var, stats.var)

    def test_blend_weights_current_batch(self):
        ema = EmaNormState(momentum=0.9)
        ema.update(ChannelStats([0.0], [1.0]))
        out = ema.update(ChannelStats([1.0], [3.0]))
        assert out.mean[0] == pytest.approx(0.9, abs=1e-15)
        assert out.var[0] == pytest.approx(0.1 * 1.0 + 0.9 * 3.0, abs=1e-15)

    def test_bad_momentum(self):
        with pytest.raises(ValueError):
            EmaNormState(momentum=0.0)


class TestChannelStats:
    def test_validation(self):
        with pytest.raises(ValueError):
            ChannelStats([0.0], [-1.0])
        with pytest.raises(Exception):
            ChannelStats([0.0, 1.0], [1.0])

    def test_batch_channel_stats_population(self):
        f = np.array([[[1.0, 3.0]]])  # one sample, one channel, two positions
        stats = batch_channel_stats(f)
        assert stats.mean[0] == 2.0
        assert stats.var[0] == 1.0
