import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moppa import (
    ConfigError,
    ParameterError,
    RouterState,
    ScheduleConfig,
    route_regularization,
    route_weights,
    schedule_weight,
    total_loss,
)
from moppa import autodiff as ad

LOG3 = np.log(3.0)


class TestRouteWeights:
    def test_uniform_logits(self):
        alpha = route_weights(RouterState(np.zeros(3)))
        np.testing.assert_allclose(alpha, [1 / 3] * 3, atol=1e-15)

    def test_ln2_logit(self):
        alpha = route_weights(RouterState(np.array([np.log(2.0), 0.0, 0.0])))
        np.testing.assert_allclose(alpha, [0.5, 0.25, 0.25], atol=1e-12)

    def test_saturation_without_overflow(self):
        alpha = route_weights(np.array([1000.0, 0.0, 0.0]))
        assert np.all(np.isfinite(alpha))
        assert alpha[0] == 1.0 and alpha[1] == 0.0 and alpha[2] == 0.0

    def test_simplex(self, rng):
        for _ in range(20):
            alpha = route_weights(rng.normal(0, 5, 3))
            assert abs(alpha.sum() - 1.0) < 1e-12
            assert np.all(alpha > 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
    def test_shift_invariance(self, seed, shift):
        logits = np.random.default_rng(seed).normal(0, 3, 3)
        a1 = route_weights(logits)
        a2 = route_weights(logits + shift)
        assert np.max(np.abs(a1 - a2)) < 1e-12

    def test_non_finite_rejected(self):
        with pytest.raises(ParameterError):
            RouterState(np.array([np.nan, 0.0, 0.0]))


class TestRouteRegularization:
    def test_uniform_is_minus_log3(self):
        assert abs(route_regularization(np.full(3, 1 / 3)) + LOG3) < 1e-12

    def test_one_hot_is_zero(self):
        for i in range(3):
            alpha = np.zeros(3)
            alpha[i] = 1.0
            assert route_regularization(alpha) == 0.0

    def test_half_quarter_quarter(self):
        # 0.5*ln(0.5) + 2 * 0.25*ln(0.25), evaluated by hand
        expected = 0.5 * np.log(0.5) + 0.5 * np.log(0.25)
        got = route_regularization(np.array([0.5, 0.25, 0.25]))
        assert abs(got - expected) < 1e-15
        assert abs(got - (-1.0397207708399179)) < 1e-12

    def test_extrema_on_simplex_grid(self):
        # 0.05-step grid: minimum -log 3 (only at uniform), maximum 0 (vertices).
        for i in range(21):
            for j in range(21 - i):
                alpha = np.array([i, j, 20 - i - j]) / 20.0
                v = route_regularization(alpha)
                assert v >= -LOG3 - 1e-12
                assert v <= 1e-12

    def test_invalid_simplex_rejected(self):
        with pytest.raises(ParameterError):
            route_regularization(np.array([0.5, 0.2, 0.2]))
        with pytest.raises(ParameterError):
            route_regularization(np.array([1.2, -0.1, -0.1]))


class TestSchedule:
    def test_endpoints(self):
        cfg = ScheduleConfig(w=0.3, t_total=200)
        assert schedule_weight(0, cfg) == 0.3
        assert schedule_weight(100, cfg) == 0.0
        assert schedule_weight(150, cfg) == 0.0

    def test_midpoint_value(self):
        assert schedule_weight(25, ScheduleConfig(0.1, 100)) == pytest.approx(0.05, abs=1e-15)

    def test_nonincreasing(self):
        cfg = ScheduleConfig(w=1.0, t_total=37)
        values = [schedule_weight(t, cfg) for t in range(80)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert all(v == 0.0 for v in values[19:])

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            ScheduleConfig(w=-0.1, t_total=10)
        with pytest.raises(ConfigError):
            ScheduleConfig(w=0.1, t_total=0)
        with pytest.raises(ParameterError):
            schedule_weight(-1, ScheduleConfig(0.1, 10))


class TestTotalLoss:
    def test_late_phase_is_origin_exactly(self):
        cfg = ScheduleConfig(0.1, 100)
        assert total_loss(0.42, [-1.0, -0.5], 50, cfg) == 0.42
        assert total_loss(0.42, [-1.0, -0.5], 99, cfg) == 0.42

    def test_uniform_routers_at_start(self):
        cfg = ScheduleConfig(0.1, 100)
        regs = [-LOG3, -LOG3, -LOG3]
        assert abs(total_loss(1.0, regs, 0, cfg) - (1.0 - 0.1 * LOG3)) < 1e-12

    def test_zero_coefficient(self):
        cfg = ScheduleConfig(0.0, 100)
        for t in (0, 10, 99):
            assert total_loss(0.7, [-1.0], t, cfg) == 0.7

    def test_empty_regs(self):
        assert total_loss(0.3, [], 0, ScheduleConfig(0.1, 10)) == 0.3

    def test_mean_not_sum(self):
        cfg = ScheduleConfig(1.0, 2)
        assert abs(total_loss(0.0, [-1.0, -3.0], 0, cfg) - (-2.0)) < 1e-15


def _reg_gradient(logits):
    """Gradient of the route penalty w.r.t. the logits, via the tape."""
    p = ad.Parameter("logits", logits)
    tape = ad.Tape()
    alpha = ad.softmax(tape.param(p))
    reg = ad.sum_all(ad.mul(alpha, ad.log(alpha)))
    tape.backward(reg)
    return p.grad


def test_descending_penalty_moves_toward_uniform(rng):
    # One small step down w * L_reg strictly reduces the largest blend weight.
    step, w = 1e-3, 0.1
    checked = 0
    while checked < 50:
        logits = rng.normal(0.0, 2.0, 3)
        alpha = route_weights(logits)
        if np.max(alpha) - 1 / 3 < 1e-3:
            continue
        moved = route_weights(logits - step * w * _reg_gradient(logits))
        assert np.max(moved) < np.max(alpha)
        checked += 1
