"""Metric tests built on hand-evaluable cases and synthetic convergence data."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dedrom.errors import (ConfigError, ConvergenceRegimeError,
                           DegenerateDataError)
from dedrom.metrics import (benchmark_inference, nrmse_at_time,
                            nrmse_per_time, nrmse_total, richardson_error,
                            sweep_to_csv, sweep_to_svg)

# Truth [[0,0],[2,2]]: global mean 1, variance 1, so the denominator is 1
# and numerators can be read off directly.
TRUTH = np.array([[0.0, 0.0], [2.0, 2.0]])


class TestNrmse:
    def test_hand_case_per_time(self):
        pred = TRUTH + np.array([[2.0, 2.0], [0.0, 0.0]])
        per = nrmse_per_time(pred, TRUTH)
        assert per[0] == pytest.approx(2.0, rel=1e-12)
        assert per[1] == 0.0
        assert nrmse_at_time(pred, TRUTH, 0) == pytest.approx(2.0, rel=1e-12)
        assert nrmse_total(pred, TRUTH) == pytest.approx(math.sqrt(2.0),
                                                         rel=1e-12)

    def test_uniform_offset(self):
        pred = TRUTH + 1.0
        assert nrmse_total(pred, TRUTH) == pytest.approx(1.0, rel=1e-12)
        assert np.allclose(nrmse_per_time(pred, TRUTH), 1.0, rtol=1e-12)

    def test_perfect_prediction_is_zero(self):
        assert nrmse_total(TRUTH, TRUTH) == 0.0
        assert np.all(nrmse_per_time(TRUTH, TRUTH) == 0.0)

    def test_mean_predictor_scores_one(self):
        rng = np.random.default_rng(0)
        truth = rng.normal(size=(7, 11))
        pred = np.full_like(truth, truth.mean())
        assert nrmse_total(pred, truth) == pytest.approx(1.0, rel=1e-12)

    def test_total_is_rms_of_per_time(self):
        rng = np.random.default_rng(1)
        truth = rng.normal(size=(5, 9))
        pred = truth + rng.normal(size=(5, 9))
        per = nrmse_per_time(pred, truth)
        total = nrmse_total(pred, truth)
        assert total ** 2 == pytest.approx(np.mean(per ** 2), rel=1e-12)

    @given(st.floats(min_value=-50, max_value=50),
           st.floats(min_value=0.1, max_value=50),
           st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_affine_invariance(self, shift, scale, seed):
        rng = np.random.default_rng(seed)
        truth = rng.normal(size=(4, 6))
        pred = truth + rng.normal(size=(4, 6))
        base = nrmse_total(pred, truth)
        mapped = nrmse_total(shift + scale * pred, shift + scale * truth)
        assert mapped == pytest.approx(base, rel=1e-9)

    def test_constant_truth_rejected(self):
        with pytest.raises(DegenerateDataError):
            nrmse_total(TRUTH, np.full((2, 2), 5.0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            nrmse_total(np.zeros((2, 3)), TRUTH)

    def test_bad_time_index_rejected(self):
        with pytest.raises(ConfigError):
            nrmse_at_time(TRUTH, TRUTH, 5)


class TestRichardson:
    @pytest.mark.parametrize("p", [1.0, 2.0, 4.0])
    def test_recovers_synthetic_order(self, p):
        exact, c, r = 3.7, 0.9, 2.0
        h = 0.1
        coarse = exact + c * (r * r * h) ** p
        medium = exact + c * (r * h) ** p
        fine = exact + c * h ** p
        order, extrapolated, rel = richardson_error(coarse, medium, fine, r)
        assert order == pytest.approx(p, abs=1e-10)
        assert extrapolated == pytest.approx(exact, rel=1e-10)
        assert rel == pytest.approx(abs(fine - exact) / abs(exact), rel=1e-6)

    def test_identical_values_rejected(self):
        with pytest.raises(ConvergenceRegimeError):
            richardson_error(1.0, 1.0, 1.0, 2.0)

    def test_non_monotone_rejected(self):
        with pytest.raises(ConvergenceRegimeError):
            richardson_error(1.0, 2.0, 1.5, 2.0)

    def test_non_contracting_rejected(self):
        with pytest.raises(ConvergenceRegimeError):
            richardson_error(1.0, 1.1, 1.3, 2.0)

    def test_bad_refinement_factor_rejected(self):
        with pytest.raises(ConfigError):
            richardson_error(1.0, 1.1, 1.15, 1.0)


SWEEP_ROWS = [
    {"n_l": 1, "nrmse_qt": 0.5, "nrmse_ts": 0.4, "nrmse_qs": 0.6},
    {"n_l": 2, "error": "StepFailureError: diverged"},
    {"n_l": 3, "nrmse_qt": 0.05, "nrmse_ts": 0.04, "nrmse_qs": 0.06},
]


class TestSweepOutputs:
    def test_csv_roundtrip(self, tmp_path):
        path = tmp_path / "sweep.csv"
        sweep_to_csv(SWEEP_ROWS, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert rows[0]["n_l"] == "1"
        assert float(rows[0]["nrmse_qs"]) == 0.6
        assert "diverged" in rows[1]["error"]
        assert rows[1]["nrmse_qt"] == ""

    def test_svg_written(self, tmp_path):
        path = tmp_path / "sweep.svg"
        sweep_to_svg(SWEEP_ROWS, path)
        head = path.read_text()[:300]
        assert "svg" in head.lower()


class TestBenchmark:
    def test_speedup_of_synthetic_sleepers(self):
        import time

        result = benchmark_inference(lambda: time.sleep(0.001),
                                     lambda: time.sleep(0.02),
                                     repeats=5, sim_repeats=2)
        assert result["speedup"] > 5.0
        assert result["surrogate_repeats"] == 5
        assert result["simulator_repeats"] == 2
        assert result["surrogate_mean"] > 0

    def test_too_few_repeats_rejected(self):
        with pytest.raises(ConfigError):
            benchmark_inference(lambda: None, lambda: None, repeats=4)
