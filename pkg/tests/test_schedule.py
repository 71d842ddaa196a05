"""Tests for temperature schedules, coarse supervision, and the
period-aware evaluation-epoch rule."""

import numpy as np
import pytest

from tempcl.schedule import (
    SCHEDULE_KINDS,
    CoarseTauConfig,
    ScheduleConfig,
    per_anchor_tau,
    recommended_eval_epoch,
    tau_at,
    tau_series,
)

DEFAULTS = ScheduleConfig(kind="cosine", tau_minus=0.1, tau_plus=1.0, period_T=400)


class TestCosine:
    def test_landmarks_exact(self):
        """tau(0) = tau_plus, tau(T/2) = tau_minus, tau(T/4) = midpoint."""
        assert tau_at(DEFAULTS, 0) == 1.0
        assert tau_at(DEFAULTS, 200) == 0.1
        assert tau_at(DEFAULTS, 100) == 0.55

    def test_periodicity_exact(self):
        for t in range(0, 400, 7):
            assert tau_at(DEFAULTS, t + 400) == tau_at(DEFAULTS, t)
            assert tau_at(DEFAULTS, t + 2000) == tau_at(DEFAULTS, t)

    def test_endpoint_values_mod_T(self):
        for mult in range(5):
            assert tau_at(DEFAULTS, 400 * mult) == 1.0
            assert tau_at(DEFAULTS, 400 * mult + 200) == 0.1


class TestStep:
    def test_paper_step_pattern(self):
        """Starts low, switches every step_length epochs: 0.1 then 0.5."""
        cfg = ScheduleConfig(kind="step", tau_minus=0.1, tau_plus=0.5, step_length=200)
        assert tau_at(cfg, 0) == 0.1
        assert tau_at(cfg, 199) == 0.1
        assert tau_at(cfg, 200) == 0.5
        assert tau_at(cfg, 399) == 0.5
        assert tau_at(cfg, 400) == 0.1


class TestLinearOscillation:
    CFG = ScheduleConfig(kind="linear_oscillation", tau_minus=0.1, tau_plus=1.0, period_T=400)

    def test_triangle_landmarks(self):
        assert tau_at(self.CFG, 0) == 1.0
        assert tau_at(self.CFG, 200) == 0.1
        np.testing.assert_allclose(tau_at(self.CFG, 100), 0.55, rtol=1e-12)

    def test_linear_between_extrema(self):
        vals = [tau_at(self.CFG, t) for t in range(0, 201)]
        np.testing.assert_allclose(np.diff(vals), vals[1] - vals[0], rtol=1e-9)

    def test_periodicity_exact(self):
        for t in range(0, 400, 13):
            assert tau_at(self.CFG, t + 400) == tau_at(self.CFG, t)

    def test_agrees_with_cosine_at_extrema(self):
        for t in (0, 200, 400):
            assert tau_at(self.CFG, t) == tau_at(DEFAULTS, t)


class TestRandom:
    def test_reproducible(self):
        cfg = ScheduleConfig(kind="random", tau_minus=0.1, tau_plus=0.5, seed=9)
        again = ScheduleConfig(kind="random", tau_minus=0.1, tau_plus=0.5, seed=9)
        a = [tau_at(cfg, t) for t in range(50)]
        b = [tau_at(again, t) for t in range(50)]
        assert a == b

    def test_seed_changes_sequence(self):
        a = tau_series(ScheduleConfig(kind="random", seed=1), 30)
        b = tau_series(ScheduleConfig(kind="random", seed=2), 30)
        assert not np.array_equal(a, b)

    def test_varies_across_epochs(self):
        vals = tau_series(ScheduleConfig(kind="random", seed=3), 20)
        assert len(np.unique(vals)) > 10


class TestBoundedness:
    def test_all_kinds_stay_in_bounds(self):
        for kind in SCHEDULE_KINDS:
            cfg = ScheduleConfig(kind=kind, tau_minus=0.2, tau_plus=0.9,
                                 period_T=37, step_length=11, constant_tau=0.5)
            vals = tau_series(cfg, 500)
            assert vals.min() >= 0.2 and vals.max() <= 0.9


class TestConstant:
    def test_constant_value(self):
        cfg = ScheduleConfig(kind="constant", constant_tau=0.2)
        assert all(tau_at(cfg, t) == 0.2 for t in range(0, 1000, 97))


class TestConfigValidation:
    def test_bounds_order(self):
        with pytest.raises(ValueError, match="tau_minus"):
            ScheduleConfig(tau_minus=0.5, tau_plus=0.1)

    def test_positive_period(self):
        with pytest.raises(ValueError, match="period_T"):
            ScheduleConfig(period_T=0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            ScheduleConfig(kind="sawtooth")

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError, match=">= 0"):
            tau_at(DEFAULTS, -1)


class TestPerAnchorTau:
    def test_head_tail_assignment(self):
        """Anchors in head classes take tau_head, all others tau_tail."""
        coarse = CoarseTauConfig(head_classes=frozenset(range(5)), tau_head=1.0, tau_tail=0.1)
        np.testing.assert_array_equal(per_anchor_tau([0, 7], coarse), [1.0, 0.1])

    def test_degenerate_supervision(self):
        coarse = CoarseTauConfig(head_classes=frozenset({0}), tau_head=0.3, tau_tail=0.3)
        np.testing.assert_array_equal(per_anchor_tau([0, 1, 2], coarse), [0.3, 0.3, 0.3])

    def test_all_head(self):
        coarse = CoarseTauConfig(head_classes=frozenset(range(4)), tau_head=0.8, tau_tail=0.1)
        np.testing.assert_array_equal(per_anchor_tau([2, 0, 3], coarse), [0.8, 0.8, 0.8])

    def test_empty_head_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            CoarseTauConfig(head_classes=frozenset())


class TestRecommendedEvalEpoch:
    def test_five_periods(self):
        assert recommended_eval_epoch(2000, 400) == 1880

    def test_single_period(self):
        assert recommended_eval_epoch(400, 400) == 280

    def test_partial_trailing_period(self):
        assert recommended_eval_epoch(1000, 400) == 680

    def test_run_shorter_than_period(self):
        with pytest.raises(ValueError, match="shorter"):
            recommended_eval_epoch(100, 400)
