import json

import numpy as np
import pytest

from conftest import tiny_spec

from calodqm.model import build_model
from calodqm.score import (
    SIGMA_EPS,
    SigmaCalib,
    anomaly_score,
    calibrate_sigma,
    flags_at,
    mae_window,
    reconstruct_series,
    threshold_for_capture,
    window_errors,
)


class TestMae:
    def test_simple_example(self):
        mask = np.ones((1, 1, 1), dtype=bool)
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        xb = np.array([2.0, 5.0]).reshape(2, 1, 1, 1)
        assert mae_window(x, xb, mask)[0, 0, 0] == 1.5

    def test_zero_at_equality(self, desk_windows, desk_geometry):
        w = desk_windows[0]
        err = mae_window(w.values, w.values.copy(), desk_geometry.valid_mask)
        assert np.all(err == 0.0)

    def test_matches_brute_force(self, desk_geometry):
        rng = np.random.default_rng(5)
        T = 5
        x = rng.uniform(size=(T,) + desk_geometry.dims)
        xb = rng.uniform(size=(T,) + desk_geometry.dims)
        fast = mae_window(x, xb, desk_geometry.valid_mask)
        slow = np.zeros(desk_geometry.dims)
        for i in range(desk_geometry.dims[0]):
            for j in range(desk_geometry.dims[1]):
                for k in range(desk_geometry.dims[2]):
                    if desk_geometry.valid_mask[i, j, k]:
                        slow[i, j, k] = sum(
                            abs(x[t, i, j, k] - xb[t, i, j, k]) for t in range(T)
                        ) / T
        assert np.max(np.abs(fast - slow)) < 1e-12

    def test_shape_mismatch(self, desk_geometry):
        with pytest.raises(ValueError):
            mae_window(
                np.zeros((2,) + desk_geometry.dims),
                np.zeros((3,) + desk_geometry.dims),
                desk_geometry.valid_mask,
            )


class TestSigma:
    def test_floor(self):
        errors = np.zeros((4, 2, 2, 1))
        calib = calibrate_sigma(errors, "reset")
        assert np.all(calib.sigma == SIGMA_EPS)

    def test_score_division(self):
        calib = SigmaCalib(np.full((1, 1, 1), 0.5), "reset")
        scores = anomaly_score(np.full((3, 1, 1, 1), 1.5), calib)
        assert np.all(scores == 3.0)

    def test_constant_error_channel_finite(self):
        errors = np.ones((4, 1, 1, 1))
        calib = calibrate_sigma(errors, "reset")
        scores = anomaly_score(errors, calib)
        assert np.all(np.isfinite(scores)) and np.all(scores > 0)

    def test_json_round_trip(self):
        calib = SigmaCalib(np.random.default_rng(0).uniform(0.1, 1, (2, 3, 1)), "preserve")
        back = SigmaCalib.from_json_dict(json.loads(json.dumps(calib.to_json_dict())))
        assert back.state_mode == "preserve"
        assert np.allclose(back.sigma, calib.sigma)


class TestThreshold:
    def test_one_to_ten_at_ninety(self):
        scores = np.arange(1.0, 11.0)
        alpha = threshold_for_capture(scores, 0.90)
        assert 1.0 <= alpha < 2.0
        assert int((scores > alpha).sum()) == 9

    def test_rate_one_below_min(self):
        scores = np.array([3.0, 5.0, 7.0])
        alpha = threshold_for_capture(scores, 1.0)
        assert alpha < 3.0
        assert np.all(scores > alpha)

    def test_all_equal_full_capture(self):
        scores = np.full(20, 4.2)
        alpha = threshold_for_capture(scores, 0.9)
        assert alpha < 4.2
        assert np.all(scores > alpha)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            threshold_for_capture(np.array([]), 0.9)

    def test_bad_rate_raises(self):
        with pytest.raises(ValueError):
            threshold_for_capture(np.ones(3), 0.0)

    @pytest.mark.parametrize("rate", [0.90, 0.95, 0.99])
    def test_recall_at_least_rate(self, rate):
        rng = np.random.default_rng(17)
        for _ in range(20):
            scores = rng.normal(size=rng.integers(5, 200))
            alpha = threshold_for_capture(scores, rate)
            recall = float((scores > alpha).mean())
            assert recall >= rate

    def test_flags_definition(self):
        scores = np.array([0.5, 1.0, 2.0])
        flags = flags_at(scores, 1.0)
        assert flags.tolist() == [False, False, True]


@pytest.fixture(scope="module")
def scored_model(desk_geometry, desk_topo):
    return build_model(tiny_spec(desk_geometry.dims, T=5), desk_topo, seed=5)


class TestReconstruction:
    def test_deterministic(self, scored_model, desk_windows):
        a, _ = reconstruct_series(scored_model, desk_windows[:3], "reset")
        b, _ = reconstruct_series(scored_model, desk_windows[:3], "reset")
        assert np.array_equal(a, b)

    def test_single_window_modes_agree(self, scored_model, desk_windows):
        a, _ = reconstruct_series(scored_model, desk_windows[:1], "reset")
        b, _ = reconstruct_series(scored_model, desk_windows[:1], "preserve")
        assert np.array_equal(a, b)

    def test_preserve_requires_contiguity(self, scored_model, desk_windows):
        gappy = [desk_windows[0], desk_windows[2]]
        with pytest.raises(ValueError):
            reconstruct_series(scored_model, gappy, "preserve")
        reconstruct_series(scored_model, gappy, "reset")  # fine without state

    def test_unknown_mode(self, scored_model, desk_windows):
        with pytest.raises(ValueError):
            reconstruct_series(scored_model, desk_windows[:1], "sticky")

    def test_window_errors_masked(self, scored_model, desk_windows, desk_geometry):
        recons, _ = reconstruct_series(scored_model, desk_windows[:2], "reset")
        errors = window_errors(desk_windows[:2], recons, desk_geometry.valid_mask)
        assert errors.shape == (2,) + desk_geometry.dims
        assert np.all(errors[:, ~desk_geometry.valid_mask] == 0.0)
