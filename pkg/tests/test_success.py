import numpy as np
import pytest
from scipy.special import expit

from builders import box, make_frame
from config import PspConfig, SuccessModelConfig
from picking.common import ConfigError
from picking.features import FEATURE_INDEX
from picking.pick import make_action
from picking.success import PspModel, TrueSuccessModel, describe, psp_prob, true_prob


def phi_with(**named):
    values = np.zeros(78)
    values[FEATURE_INDEX["kind_box"]] = 1.0
    values[FEATURE_INDEX["edge_distance"]] = 0.2
    for name, value in named.items():
        values[FEATURE_INDEX[name]] = value
    return values


def test_zero_cups_is_unlikely(oracle):
    assert true_prob(oracle, np.zeros(78)) < 0.1
    assert true_prob(oracle, phi_with(n_active_cups=0)) < 0.1


def test_box_closed_form(oracle):
    values = np.zeros(78)
    values[FEATURE_INDEX["kind_box"]] = 1.0
    values[FEATURE_INDEX["edge_distance"]] = 0.05
    assert true_prob(oracle, values) == pytest.approx(float(expit(-3.0 + 0.0)), abs=1e-15)


def test_more_cups_raise_probability(oracle):
    assert true_prob(oracle, phi_with(n_active_cups=4)) > true_prob(oracle, phi_with(n_active_cups=3))


@pytest.mark.parametrize("name, low, high", [
    ("plane_rmse", 0.001, 0.004),
    ("cup_align_mean", 0.05, 0.2),
    ("pkg_height", 0.1, 0.3),
])
def test_quality_signals_lower_probability(oracle, name, low, high):
    better = true_prob(oracle, phi_with(n_active_cups=4, **{name: low}))
    worse = true_prob(oracle, phi_with(n_active_cups=4, **{name: high}))
    assert worse < better


def test_polybag_penalty(oracle):
    boxy = phi_with(n_active_cups=4)
    bag = boxy.copy()
    bag[FEATURE_INDEX["kind_box"]] = 0.0
    bag[FEATURE_INDEX["kind_polybag"]] = 1.0
    assert true_prob(oracle, bag) < true_prob(oracle, boxy)


def test_probabilities_stay_in_range(oracle, psp):
    rng = np.random.default_rng(0)
    for _ in range(200):
        values = rng.normal(scale=20.0, size=78)
        assert 0.0 < true_prob(oracle, values) < 1.0
        assert 0.0 <= psp_prob(psp, values) <= 1.0


def test_noiseless_psp_equals_truth(oracle):
    exact = PspModel(base=oracle, noise_amplitude=0.0, smoothing=0.0)
    rng = np.random.default_rng(1)
    for _ in range(50):
        values = rng.normal(size=78)
        assert psp_prob(exact, values) == true_prob(oracle, values)


def test_psp_is_deterministic(psp):
    values = np.random.default_rng(2).normal(size=78)
    assert psp_prob(psp, values) == psp_prob(psp, values.copy())


def test_psp_noise_is_bounded(oracle):
    noisy = PspModel(base=oracle, noise_amplitude=0.05, smoothing=0.0)
    rng = np.random.default_rng(3)
    gaps = []
    for _ in range(1000):
        values = rng.normal(scale=0.5, size=78)
        gaps.append(abs(psp_prob(noisy, values) - true_prob(oracle, values)))
    assert max(gaps) <= 0.05 + 1e-12
    assert np.mean(gaps) <= 0.05
    assert max(gaps) > 0.0


def test_noiseless_psp_preserves_argmax(oracle):
    exact = PspModel(base=oracle, noise_amplitude=0.0, smoothing=0.0)
    rng = np.random.default_rng(4)
    for _ in range(20):
        candidates = rng.normal(size=(6, 78))
        by_psp = int(np.argmax([psp_prob(exact, c) for c in candidates]))
        by_truth = int(np.argmax([true_prob(oracle, c) for c in candidates]))
        assert by_psp == by_truth


def test_quantized_output(psp):
    p = psp_prob(psp, np.random.default_rng(5).normal(size=78))
    assert round(p / 0.01) * 0.01 == pytest.approx(p)


def test_centroid_pick_calibration(flat_box_frame, center_action, oracle):
    assert oracle.prob_for_action(flat_box_frame, center_action) >= 0.95


def test_edge_pick_calibration(oracle):
    frame = make_frame(box(1, 0.6, 0.5, 0.3, 0.3, 0.1))
    action = make_action(frame, 0.5, 0.4, 0.0, 1)
    assert len(action.cups) <= 2
    assert oracle.prob_for_action(frame, action) <= 0.7


def test_unknown_weight_name():
    with pytest.raises(ConfigError, match="unknown features"):
        TrueSuccessModel.from_config(SuccessModelConfig(weights={"glitter": 1.0}))


def test_negative_noise_rejected(oracle):
    with pytest.raises(ConfigError):
        PspModel(base=oracle, noise_amplitude=-0.1)


def test_psp_from_config_wraps_oracle_weights():
    psp = PspModel.from_config(PspConfig(noise_amplitude=0.0, smoothing=0.0))
    weights = describe(psp.base)
    assert weights["n_active_cups"] == 0.9
    assert weights["kind_polybag"] == -0.4
    assert "kind_box" not in weights
