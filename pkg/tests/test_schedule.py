import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spherelm.exceptions import DimensionTooSmall, InsufficientData, NonFiniteLoss, ParameterOutOfRange
from spherelm.schedule import (
    LossBuffer,
    RefitParams,
    RefitState,
    Schedule,
    adaptive_refit,
    alpha,
    alpha_star,
    euler_step_sizes,
    fit_loss_profile,
    inverse_cdf_times,
    record_loss,
    truncate,
    truncation_bound,
)


class TestAnalytic:
    def test_values(self):
        assert alpha(Schedule("linear"), 0.5) == 0.5
        assert alpha(Schedule("cosine2"), 0.5) == pytest.approx(0.5, abs=1e-15)
        assert alpha(Schedule("linear", 0.879), 1.0) == 0.879

    @pytest.mark.parametrize("kind", ["linear", "cosine2"])
    @pytest.mark.parametrize("a", [1.0, 0.8, 0.3])
    def test_endpoints_and_monotone(self, kind, a):
        s = Schedule(kind, a)
        assert s(0.0) == 0.0
        assert s(1.0) == a
        vals = s(np.linspace(0, 1, 1000))
        assert np.all(np.diff(vals) >= 0)
        assert vals.max() <= a

    def test_out_of_range_time(self):
        with pytest.raises(ParameterOutOfRange):
            Schedule()(1.2)

    def test_bad_parameters(self):
        with pytest.raises(ParameterOutOfRange):
            Schedule("quadratic")
        with pytest.raises(ParameterOutOfRange):
            Schedule("linear", 0.0)
        with pytest.raises(ParameterOutOfRange):
            Schedule("linear", 1.0, knots=[[0, 0], [1, 1]])

    def test_alpha_dot_matches_difference(self):
        t = np.linspace(0.05, 0.95, 19)
        for s in (Schedule("cosine2", 0.7), Schedule("adaptive", 0.9, [[0, 0], [0.3, 0.6], [1, 1]])):
            fd = (s(t + 1e-6) - s(t - 1e-6)) / 2e-6
            # the difference straddles a knot at t=0.3, where only C1 continuity holds
            np.testing.assert_allclose(s.alpha_dot(t), fd, rtol=1e-5, atol=1e-8)

    @pytest.mark.parametrize("kind", ["linear", "cosine2"])
    def test_inverse_shape(self, kind):
        s = Schedule(kind)
        t = np.linspace(0, 1, 101)
        np.testing.assert_allclose(s.inverse_shape(s.shape(t)), t, atol=1e-12)


class TestTruncation:
    def test_identity(self):
        assert truncate(Schedule("linear"), 1.0) == Schedule("linear")

    def test_scaling(self):
        assert truncate(Schedule("linear"), 0.907)(1.0) == 0.907
        assert truncate(Schedule("cosine2"), 0.8)(0.5) == pytest.approx(0.4, abs=1e-15)

    def test_range(self):
        with pytest.raises(ParameterOutOfRange):
            truncate(Schedule(), 1.5)

    def test_sudoku_value_from_table(self):
        # 1 - 0.093 for |V|=12, d=512
        assert truncation_bound(0.1, 12, 512) == pytest.approx(0.907, abs=1e-3)


class TestAlphaStar:
    def test_table_entries(self):
        assert alpha_star(0.1, 12, 256) == pytest.approx(0.132, abs=1e-3)
        assert alpha_star(0.01, 50000, 1024) == pytest.approx(0.114, abs=1e-3)

    def test_large_vocabulary_sweep_values(self):
        assert alpha_star(0.1, 49152, 768) == pytest.approx(0.1214, abs=1e-4)
        assert 1 - alpha_star(0.1, 49152, 768) == pytest.approx(0.879, abs=1e-3)

    def test_dimension_too_small(self):
        with pytest.raises(DimensionTooSmall):
            alpha_star(0.01, 50000, 8)

    def test_bad_delta(self):
        with pytest.raises(ParameterOutOfRange):
            alpha_star(1.0, 12, 256)

    @given(v=st.integers(2, 10**6), d=st.integers(64, 8192))
    def test_decreases_with_dimension(self, v, d):
        try:
            a1 = alpha_star(0.1, v, d)
        except DimensionTooSmall:
            return
        assert alpha_star(0.1, v, 2 * d) < a1
        assert alpha_star(0.01, v, d) > a1


class TestStepSizes:
    @pytest.mark.parametrize("n", [1, 2, 4, 64])
    def test_full_linear(self, n):
        s = euler_step_sizes(Schedule("linear"), n)
        np.testing.assert_array_equal(s, [1.0 / (n - k) for k in range(n)])

    def test_full_linear_odd_grid(self):
        # k/17 is inexact in binary, so equality holds to rounding only
        s = euler_step_sizes(Schedule("linear"), 17)
        np.testing.assert_allclose(s, [1.0 / (17 - k) for k in range(17)], rtol=1e-14)

    def test_truncated_two_steps(self):
        np.testing.assert_allclose(euler_step_sizes(Schedule("linear", 0.8), 2), [0.4, 0.4 / 0.6], atol=1e-15)

    @pytest.mark.parametrize("sched", [Schedule("linear", 0.7), Schedule("cosine2"), Schedule("cosine2", 0.9)])
    def test_composition(self, sched):
        n = 33
        a = sched(np.arange(n + 1) / n)
        s = euler_step_sizes(sched, n)
        for k in range(n):
            if a[k + 1] < 1.0:
                assert a[k] + s[k] * (1 - a[k]) == pytest.approx(a[k + 1], abs=1e-12)

    def test_zero_steps(self):
        with pytest.raises(ParameterOutOfRange):
            euler_step_sizes(Schedule(), 0)


class TestLossBuffer:
    def test_append_and_evict(self):
        buf = LossBuffer(3)
        record_loss(buf, 0.5, 2.3)
        assert len(buf) == 1
        for t in (0.1, 0.2, 0.3):
            buf.record(t, 1.0)
        assert len(buf) == 3
        assert buf.entries[0][0] == 0.1

    def test_non_finite(self):
        with pytest.raises(NonFiniteLoss):
            LossBuffer(2).record(0.5, float("nan"))


def _filled_buffer(profile, n=4000, seed=0):
    rng = np.random.default_rng(seed)
    buf = LossBuffer(n)
    for t in rng.uniform(size=n):
        buf.record(t, profile(t))
    return buf


def _smoothstep(t, lo=0.4, hi=0.6):
    x = np.clip((t - lo) / (hi - lo), 0.0, 1.0)
    return x * x * (3 - 2 * x)


class TestAdaptiveRefit:
    def test_constant_profile_gives_base(self):
        base = Schedule("cosine2", 0.9)
        sched, _ = adaptive_refit(_filled_buffer(lambda t: 1.0), base, RefitParams())
        t = np.linspace(0, 1, 64)
        np.testing.assert_allclose(sched(t), base(t), atol=1e-9)

    def test_first_refit_has_no_ema_lag(self):
        base = Schedule("linear")
        params = RefitParams(ema_rate=0.9)
        buf = _filled_buffer(lambda t: float(_smoothstep(t)))
        sched, state = adaptive_refit(buf, base, params)
        grid = np.linspace(0, 1, params.grid_size)
        prof = fit_loss_profile(*buf.arrays(), params.n_interior_knots, params.ridge)
        w = (1 - params.uniform_mix) * np.maximum(np.nan_to_num(prof.derivative()(grid)), 0) + params.uniform_mix
        expected = np.maximum.accumulate(np.clip(base.shape(inverse_cdf_times(w, grid)), 0, 1))
        expected[0], expected[-1] = 0.0, 1.0
        np.testing.assert_allclose(sched.knots[:, 1], expected, atol=1e-12)
        assert state.count == 1

    def test_uniform_weights_identity(self):
        grid = np.linspace(0, 1, 64)
        np.testing.assert_allclose(inverse_cdf_times(np.full(64, 1e-3), grid), grid, atol=1e-12)

    def test_step_density_concentrates(self):
        # exact derivative of a ramp on [0.4, 0.6], mixed with uniform mass
        grid = np.linspace(0, 1, 64)
        g = ((grid >= 0.4) & (grid <= 0.6)).astype(float) * 5.0
        warped = inverse_cdf_times((1 - 1e-3) * g + 1e-3, grid)
        assert np.mean((warped >= 0.4) & (warped <= 0.6)) >= 0.9

    def test_insufficient_data(self):
        buf = _filled_buffer(lambda t: 1.0, n=100)
        with pytest.raises(InsufficientData):
            adaptive_refit(buf, Schedule(), RefitParams())

    def test_stationary_convergence(self):
        buf = _filled_buffer(lambda t: float(_smoothstep(t)) + 0.1 * t)
        base, params = Schedule("linear"), RefitParams()
        state, prev = RefitState(), None
        for _ in range(200):
            sched, state = adaptive_refit(buf, base, params, state)
            if prev is not None and np.max(np.abs(sched.knots - prev)) < 1e-6:
                break
            prev = sched.knots
        assert np.max(np.abs(sched.knots - prev)) < 1e-6

    def test_serialization_round_trip(self):
        sched, state = adaptive_refit(_filled_buffer(lambda t: t * t), Schedule("linear", 0.75), RefitParams())
        again = Schedule.from_json(sched.to_json())
        assert again == sched
        assert json.loads(sched.to_json())["kind"] == "adaptive"
        assert RefitState.from_dict(state.to_dict()).count == state.count


@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 100.0), kind=st.sampled_from(["linear", "cosine2"]))
def test_refit_of_adversarial_data_is_valid(seed, scale, kind):
    rng = np.random.default_rng(seed)
    buf = LossBuffer(700)
    for t in rng.uniform(size=700):
        buf.record(t, scale * rng.standard_normal() - 3 * t)
    sched, _ = adaptive_refit(buf, Schedule(kind, 0.8), RefitParams(min_points_per_grid=10))
    vals = sched(np.linspace(0, 1, 1000))
    assert sched(0.0) == 0.0 and sched(1.0) == 0.8
    assert np.all(np.diff(vals) >= 0)
    assert np.all(np.diff(sched.knots[:, 0]) > 0)
