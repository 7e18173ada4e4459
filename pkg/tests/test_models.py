from dataclasses import replace
from functools import partial
from unittest.mock import patch

import numpy as np
import pytest
from scipy.optimize import OptimizeResult

from common.errors import FitError, InsufficientDataError, ValidationError
from estimator.estimator import Cn2Profile, EstimatorConfig
from models.models import (
    HILO,
    HV57,
    PRESETS,
    TRAPPES,
    CalibrationBand,
    GaussianLayer,
    GeneralizedHVParams,
    HVParams,
    calibrate_scale_factor,
    fit_generalized_hv,
    generalized_hv_cn2,
    hv_cn2,
    model_curve,
)

TRUTH = TRAPPES.with_values({"A": 2.0e-13, "C": 1.5e-4, "D": 2.0e-17, "H_B": 1800.0, "H_C": 1150.0})


def _profile(altitudes, cn2, dz: float = 100.0) -> Cn2Profile:
    return Cn2Profile(np.asarray(altitudes, dtype=float), np.asarray(cn2, dtype=float), EstimatorConfig(dz=dz))


def _band_profile(factor: float = 1.0) -> Cn2Profile:
    z = np.arange(1000.0, 4001.0, 100.0)
    return _profile(z, factor * hv_cn2(z))


def _truth_profile(noise: float = 0.0, seed: int = 0) -> Cn2Profile:
    z = np.arange(0.0, 25_001.0, 50.0)
    cn2 = generalized_hv_cn2(z, TRUTH)
    if noise:
        cn2 = cn2 * np.random.default_rng(seed).lognormal(0.0, noise, z.size)
    return _profile(z, cn2, dz=50.0)


def test_hv57_reference_values():
    assert hv_cn2(0.0) == pytest.approx(1.727e-14, rel=1e-3)
    assert hv_cn2(10_000.0) == pytest.approx(1.666e-17, rel=1e-3)


def test_hv57_middle_term_independent_of_parameters():
    z = 1500.0
    other = HVParams(w=40.0, A=5e-14)
    # Only the ground and high-altitude terms depend on A and w.
    first = hv_cn2(z) - 0.00594 * (21.0 / 27.0) ** 2 * (z / 1e5) ** 10 * np.exp(-z / 1000.0) - 1.7e-14 * np.exp(-15.0)
    second = hv_cn2(z, other) - 0.00594 * (40.0 / 27.0) ** 2 * (z / 1e5) ** 10 * np.exp(-z / 1000.0)
    second -= 5e-14 * np.exp(-15.0)
    assert first == pytest.approx(2.7e-16 * np.exp(-1.0))
    assert second == pytest.approx(first)


def test_hv_params_validation():
    with pytest.raises(ValidationError):
        HVParams(w=0.0)


def test_hv_vectorised():
    values = hv_cn2(np.array([0.0, 5000.0, 20_000.0]))
    assert values.shape == (3,)
    assert np.all(values > 0)


def test_trappes_gaussian_term_at_centre():
    only_d = replace(TRAPPES, A=0.0, B=0.0, C=0.0)
    assert generalized_hv_cn2(TRAPPES.H_D, only_d) == pytest.approx(TRAPPES.D)


def test_hilo_layer_peak():
    layer = HILO.layers[0]
    without = replace(HILO, layers=(replace(layer, E=0.0),))
    difference = generalized_hv_cn2(layer.H_E, HILO) - generalized_hv_cn2(layer.H_E, without)
    assert difference == pytest.approx(layer.E)


def test_zero_magnitudes_give_zero():
    silent = replace(TRAPPES, A=0.0, B=0.0, C=0.0, D=0.0, layers=(GaussianLayer(E=0.0, H_E=2000.0, e=100.0),))
    np.testing.assert_array_equal(generalized_hv_cn2(np.linspace(0, 30_000, 31), silent), 0.0)


@pytest.mark.parametrize("preset", ["hv57", "trappes", "hilo"])
def test_presets_positive(preset):
    assert np.all(PRESETS[preset](np.linspace(0.0, 30_000.0, 301)) > 0)


def test_generalized_params_validation():
    with pytest.raises(ValidationError):
        replace(TRAPPES, A=-1.0)
    with pytest.raises(ValidationError):
        replace(TRAPPES, H_B=0.0)
    with pytest.raises(ValidationError):
        replace(TRAPPES, fixed=frozenset({"Z"}))


def test_generalized_params_dict_round_trip():
    data = HILO.to_dict()
    assert data["fixed"] == sorted(HILO.fixed)
    assert GeneralizedHVParams.from_dict(data) == HILO


def test_generalized_params_from_incomplete_dict():
    with pytest.raises(ValidationError):
        GeneralizedHVParams.from_dict({"A": 1e-13})


def test_layer_parameter_names():
    assert HILO.names()[-3:] == ["E_1", "H_E_1", "e_1"]
    assert HILO.free_names() == ["A", "C", "D", "H_B", "H_C", "E_1"]
    assert HILO.with_values({"E_1": 2e-16}).layers[0].E == 2e-16  # noqa: PLR2004


def test_model_curve():
    frame = model_curve(PRESETS["hv57"], [0.0, 10_000.0])
    assert list(frame.columns) == ["altitude_m", "cn2_m_23"]
    assert frame["cn2_m_23"].iloc[0] == pytest.approx(1.727e-14, rel=1e-3)


def test_calibration_recovers_factor():
    result = calibrate_scale_factor(_band_profile(0.1), PRESETS["hv57"], station_elevation=0.0)
    assert result.c == pytest.approx(10.0)
    assert result.residual_rms == pytest.approx(0.0, abs=1e-12)
    assert result.levels_used == 31  # noqa: PLR2004


def test_calibration_identity():
    result = calibrate_scale_factor(_band_profile(), PRESETS["hv57"], station_elevation=0.0)
    assert result.c == pytest.approx(1.0)
    assert result.residual_rms == pytest.approx(0.0, abs=1e-12)


def test_calibration_equivariant_in_profile_scale():
    rng = np.random.default_rng(8)
    z = np.arange(1000.0, 4001.0, 100.0)
    profile = _profile(z, hv_cn2(z) * rng.lognormal(0.0, 0.5, z.size))
    base = calibrate_scale_factor(profile, PRESETS["hv57"], station_elevation=0.0)
    for k in rng.uniform(1e-3, 1e3, 5):
        scaled = calibrate_scale_factor(profile.scaled(k), PRESETS["hv57"], station_elevation=0.0)
        assert scaled.c == pytest.approx(base.c / k, rel=1e-9)
        assert scaled.residual_rms == pytest.approx(base.residual_rms, rel=1e-9)


def test_calibration_invariant_to_common_scaling():
    profile = _band_profile(0.5)
    reference = partial(hv_cn2, params=HV57)
    base = calibrate_scale_factor(profile, reference, station_elevation=0.0)
    both = calibrate_scale_factor(profile.scaled(7.0), lambda z: 7.0 * reference(z), station_elevation=0.0)
    assert both.c == pytest.approx(base.c, rel=1e-12)


def test_calibration_custom_band_and_elevation():
    z = np.arange(0.0, 5001.0, 100.0)
    profile = _profile(z, hv_cn2(z + 168.0) / 4.0)
    result = calibrate_scale_factor(profile, PRESETS["hv57"], CalibrationBand(500.0, 2000.0), station_elevation=168.0)
    assert result.c == pytest.approx(4.0)
    assert result.levels_used == 16  # noqa: PLR2004


def test_calibration_without_levels_in_band():
    with pytest.raises(InsufficientDataError):
        calibrate_scale_factor(_profile([100.0, 200.0, 300.0], [1e-15] * 3), PRESETS["hv57"], station_elevation=0.0)


def test_calibration_excludes_non_positive_levels():
    profile = _band_profile(0.1)
    cn2 = profile.cn2.copy()
    cn2[[3, 7]] = 0.0
    result = calibrate_scale_factor(_profile(profile.altitudes, cn2), PRESETS["hv57"], station_elevation=0.0)
    assert result.excluded == 2  # noqa: PLR2004
    assert result.levels_used == 29  # noqa: PLR2004
    assert result.c == pytest.approx(10.0)


def test_calibration_needs_three_positive_levels():
    sparse = _profile([1000.0, 1100.0, 1200.0], [1e-16, 0.0, 1e-16])
    with pytest.raises(InsufficientDataError):
        calibrate_scale_factor(sparse, PRESETS["hv57"], station_elevation=0.0)


def test_calibration_band_validation():
    with pytest.raises(ValidationError):
        CalibrationBand(4000.0, 1000.0)


def test_missing_station_elevation_warns():
    with patch("models.models.logger") as mock_logger:
        result = calibrate_scale_factor(_band_profile(), PRESETS["hv57"])
    assert mock_logger.warning.called
    assert result.c == pytest.approx(1.0)


@pytest.mark.slow
def test_fit_recovers_noiseless_parameters():
    result = fit_generalized_hv(_truth_profile(), TRAPPES, n_starts=8, seed=1)
    fitted = result.params.as_dict()
    for name, value in TRUTH.as_dict().items():
        assert fitted[name] == pytest.approx(value, rel=0.01), name
    assert result.residual <= result.initial_residual


@pytest.mark.slow
def test_fit_with_lognormal_noise():
    profile = _truth_profile(noise=0.1, seed=3)
    result = fit_generalized_hv(profile, TRAPPES, n_starts=8, seed=2)
    assert result.residual <= result.initial_residual
    assert result.levels == profile.altitudes.size

    z = profile.altitudes
    deviation = np.log10(generalized_hv_cn2(z, result.params) / generalized_hv_cn2(z, TRUTH))
    assert np.sqrt(np.mean(deviation**2)) < np.log10(1.1)
    # Fixed parameters stay at their initial values.
    for name in TRAPPES.fixed:
        assert getattr(result.params, name) == getattr(TRAPPES, name)


def test_fit_is_deterministic_for_seed():
    profile = _truth_profile(noise=0.1, seed=4)
    first = fit_generalized_hv(profile, TRAPPES, n_starts=2, seed=5, threads=1)
    second = fit_generalized_hv(profile, TRAPPES, n_starts=2, seed=5, threads=2)
    assert first.params == second.params
    assert first.residual == second.residual


def test_fit_report_layout():
    result = fit_generalized_hv(_truth_profile(), TRAPPES, n_starts=1)
    report = result.to_dict()
    assert report["free"] == ["A", "C", "D", "H_B", "H_C"]
    assert len(report["starts"]) == 1
    assert report["rms"] == pytest.approx(np.sqrt(result.residual / result.levels))


def _stalled_minimize(fun, x0, **kwargs):
    return OptimizeResult(x=np.asarray(x0), fun=fun(x0), nit=3, success=False, message="Maximum iterations reached")


def test_fit_error_carries_best_attempt():
    with patch("models.models.minimize", side_effect=_stalled_minimize):
        with pytest.raises(FitError) as excinfo:
            fit_generalized_hv(_truth_profile(), TRAPPES, n_starts=3)
    best = excinfo.value.best
    assert best is not None
    assert best.residual <= best.initial_residual
    assert all(not start.success for start in best.starts)


def test_fit_needs_free_parameters():
    frozen = replace(TRAPPES, fixed=frozenset(TRAPPES.names()))
    with pytest.raises(ValidationError):
        fit_generalized_hv(_truth_profile(), frozen)


def test_fit_needs_enough_levels():
    with pytest.raises(InsufficientDataError):
        fit_generalized_hv(_profile([100.0, 200.0, 300.0], [1e-15, 1e-16, 1e-17]), TRAPPES)
