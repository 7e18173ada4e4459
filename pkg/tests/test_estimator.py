import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from common.errors import AlignmentError, FormatError, GridMismatchError, InsufficientDataError, ValidationError
from estimator.estimator import (
    TABLE_SCALE_FACTORS,
    Cn2Profile,
    EstimatorConfig,
    average_profiles,
    bin_average,
    compute_cn2,
    empirical_structure_function,
    estimate_cn2,
    lookup_scale_factor,
    read_cn2_profile,
    reject_outlier_profiles,
    write_cn2_profile,
)
from prep.prep import FluctuationProfile, UniformProfile, extract_fluctuations


def _fluctuations(n1: np.ndarray, dz: float = 1.0, omega: int = 0) -> FluctuationProfile:
    grid = UniformProfile(z0=0.0, dz=dz, n=1.00028 + n1)
    return FluctuationProfile(grid=grid, n1=n1, valid_range=(0, n1.size), omega=omega)


def _profile(cn2: list[float], z0: float = 200.0, dz: float = 100.0, **config) -> Cn2Profile:
    altitudes = z0 + dz * np.arange(len(cn2))
    return Cn2Profile(altitudes, np.array(cn2, dtype=float), EstimatorConfig(dz=dz, **config))


def test_structure_function_zero_field():
    result = empirical_structure_function(_fluctuations(np.zeros(20)), [1.0, 2.0, 5.0])
    assert result == [(1.0, 0.0), (2.0, 0.0), (5.0, 0.0)]


def test_structure_function_alternating_field():
    a = 3e-7
    n1 = a * (-1.0) ** np.arange(40)
    [(rho, value)] = empirical_structure_function(_fluctuations(n1, dz=0.5), [0.5])
    assert rho == 0.5  # noqa: PLR2004
    assert value == pytest.approx(4 * a * a)


def test_structure_function_alignment():
    with pytest.raises(AlignmentError):
        empirical_structure_function(_fluctuations(np.zeros(20)), [1.5])


def test_structure_function_separation_beyond_span():
    with pytest.raises(InsufficientDataError):
        empirical_structure_function(_fluctuations(np.zeros(20)), [20.0])


def test_estimate_zero_fluctuations():
    profile = estimate_cn2(_fluctuations(np.zeros(30)), EstimatorConfig(dz=1.0))
    assert np.all(profile.cn2 == 0.0)


def test_estimate_single_spike():
    n1 = np.zeros(9)
    n1[4] = 2e-8
    profile = estimate_cn2(_fluctuations(n1, dz=8.0), EstimatorConfig(dz=8.0, c=3.0))
    # Centre 4: both adjacent pairs differ by the spike, the outer pair does not.
    expected = 3.0 * (2 * (2e-8) ** 2 / 8.0 ** (2 / 3)) / 3
    assert profile.cn2[profile.altitudes.tolist().index(32.0)] == pytest.approx(expected)


def test_estimate_first_altitude_and_length():
    n = 1.00028 + 1e-8 * np.sin(np.arange(100))
    fluctuations = extract_fluctuations(UniformProfile(z0=1000.0, dz=50.0, n=n), omega=2)
    config = EstimatorConfig(dz=50.0, omega=2, m=3)
    profile = estimate_cn2(fluctuations, config)
    assert profile.altitudes[0] == 1000.0 + config.delta + 2 * 50.0
    assert len(profile) == 100 - 2 * 2 - 2 * 3


def test_estimate_insufficient_range():
    with pytest.raises(InsufficientDataError):
        estimate_cn2(_fluctuations(np.zeros(4)), EstimatorConfig(dz=1.0, m=2))


def test_estimate_rejects_mismatched_grid():
    with pytest.raises(ValidationError):
        estimate_cn2(_fluctuations(np.zeros(30), dz=2.0), EstimatorConfig(dz=1.0))
    with pytest.raises(ValidationError):
        estimate_cn2(_fluctuations(np.zeros(30), omega=1), EstimatorConfig(dz=1.0, omega=2))


def test_estimate_non_negative_on_random_profiles():
    rng = np.random.default_rng(2024)
    config = EstimatorConfig(dz=25.0, omega=2, m=2, c=12.5)
    for _ in range(1000):
        n1 = rng.standard_normal(rng.integers(5, 200)) * 10.0 ** rng.uniform(-10, -5)
        assert np.all(estimate_cn2(_fluctuations(n1, dz=25.0), config).cn2 >= 0.0)


@settings(max_examples=200)
@given(
    arrays(np.float64, st.integers(3, 60), elements=st.floats(-1e-6, 1e-6)),
    st.floats(1e-3, 1e3),
    st.integers(1, 3),
)
def test_estimate_scales_quadratically(n1, s, m):
    if n1.size < 2 * m + 1:
        return
    config = EstimatorConfig(dz=10.0, m=m)
    base = estimate_cn2(_fluctuations(n1, dz=10.0), config).cn2
    scaled = estimate_cn2(_fluctuations(s * n1, dz=10.0), config).cn2
    np.testing.assert_allclose(scaled, s * s * base, rtol=1e-12, atol=1e-300)


def test_estimate_matches_structure_function_combination():
    n1 = np.random.default_rng(77).normal(0.0, 1e-7, 100_000)
    config = EstimatorConfig(dz=1.0, m=2)
    fluctuations = _fluctuations(n1)
    mean_cn2 = np.mean(estimate_cn2(fluctuations, config).cn2)

    delta = config.delta
    [(_, near), (_, far)] = empirical_structure_function(fluctuations, [delta, 2 * delta])
    combination = (2 * near / delta ** (2 / 3) + far / (2 * delta) ** (2 / 3)) / 3
    assert mean_cn2 == pytest.approx(combination, rel=1e-3)


@pytest.mark.parametrize("k", [0.5, 3.0, 100.0])
def test_estimate_linear_in_scale_factor(k):
    n1 = np.random.default_rng(5).normal(0.0, 1e-8, 200)
    base = estimate_cn2(_fluctuations(n1, dz=50.0), EstimatorConfig(dz=50.0, c=2.0)).cn2
    scaled = estimate_cn2(_fluctuations(n1, dz=50.0), EstimatorConfig(dz=50.0, c=2.0 * k)).cn2
    np.testing.assert_allclose(scaled, k * base, rtol=1e-12)


def test_compute_cn2_on_sounding(synthetic_sounding):
    profile = compute_cn2(synthetic_sounding, EstimatorConfig(dz=200.0, c=100.0))
    assert profile.provenance == "07145"
    assert profile.altitudes[0] == 200.0 + 2 * 200.0
    assert np.all(profile.cn2 >= 0.0)
    assert np.all(np.diff(profile.altitudes) == 200.0)  # noqa: PLR2004


def test_lookup_scale_factor():
    assert lookup_scale_factor(200.0, 2, 1) == 100.0  # noqa: PLR2004
    assert lookup_scale_factor(25, 1, 1) == 10.0  # noqa: PLR2004
    assert lookup_scale_factor(150.0, 2, 1) is None
    assert lookup_scale_factor(200.5, 2, 1) is None


@pytest.mark.parametrize("key", [(1, 1), (2, 1), (2, 2)])
def test_table_scale_factors_grow_with_dz(key):
    values = [TABLE_SCALE_FACTORS[(dz, *key)] for dz in (25, 50, 100, 200, 400)]
    assert values == sorted(values)


def test_table_scale_factors_grow_with_m():
    for dz in (25, 50, 100, 200, 400):
        assert TABLE_SCALE_FACTORS[(dz, 2, 2)] > TABLE_SCALE_FACTORS[(dz, 2, 1)]


def test_estimator_config_validation():
    assert EstimatorConfig(dz=100.0, m=3).delta == 300.0  # noqa: PLR2004
    for bad in ({"dz": 0.0}, {"dz": 100.0, "omega": 0}, {"dz": 100.0, "c": -1.0}, {"dz": 100.0, "wavelength": 0.0}):
        with pytest.raises(ValidationError):
            EstimatorConfig(**bad)


def test_scaled_profile_tracks_scale_factor():
    profile = _profile([1e-17, 2e-17], c=2.0)
    scaled = profile.scaled(5.0)
    np.testing.assert_allclose(scaled.cn2, [5e-17, 1e-16])
    assert scaled.config.c == 10.0  # noqa: PLR2004


def test_average_of_one_profile():
    profile = _profile([1e-17, 3e-17, 2e-17])
    mean = average_profiles([profile])
    np.testing.assert_array_equal(mean.cn2, profile.cn2)
    np.testing.assert_array_equal(mean.altitudes, profile.altitudes)


def test_average_of_p_and_3p():
    values = [1e-17, 3e-17, 2e-17]
    mean = average_profiles([_profile(values), _profile([3 * v for v in values])])
    np.testing.assert_allclose(mean.cn2, [2 * v for v in values], rtol=1e-15)
    assert mean.profile_count == 2  # noqa: PLR2004


def test_average_drops_sparse_levels():
    low = _profile([1e-17] * 10, z0=0.0)
    high = _profile([3e-17] * 10, z0=500.0)
    mean = average_profiles([low, high], min_fraction=0.8)
    assert mean.altitudes.tolist() == [500.0, 600.0, 700.0, 800.0, 900.0]
    np.testing.assert_allclose(mean.cn2, 2e-17)
    assert mean.dropped_levels == 10  # noqa: PLR2004

    kept = average_profiles([low, high], min_fraction=0.5)
    assert len(kept) == 15  # noqa: PLR2004


def test_average_config_mismatch_reports_diff():
    with pytest.raises(GridMismatchError, match="omega: 2 != 1"):
        average_profiles([_profile([1e-17] * 3), _profile([1e-17] * 3, omega=1)])


def test_average_offset_grid():
    with pytest.raises(GridMismatchError):
        average_profiles([_profile([1e-17] * 3), _profile([1e-17] * 3, z0=250.0)])


def test_average_empty():
    with pytest.raises(InsufficientDataError):
        average_profiles([])


def test_reject_outlier_profiles():
    quiet = [_profile([1e-17, 2e-17, 1.5e-17]) for _ in range(3)]
    loud = _profile([1e-14, 2e-14, 1.5e-14])
    kept, rejected = reject_outlier_profiles([*quiet, loud], max_decades=2.0)
    assert kept == quiet
    assert rejected == [loud]


def test_bin_average_single_point():
    assert bin_average([(130.0, 4e-17)], dz=200.0) == [(100.0, 4e-17)]


def test_bin_average_two_points_one_bin():
    [(centre, value)] = bin_average([(210.0, 1e-17), (390.0, 3e-17)], dz=200.0)
    assert centre == 300.0  # noqa: PLR2004
    assert value == pytest.approx(2e-17)


def test_bin_average_skips_empty_bins():
    result = bin_average([(10.0, 1.0), (650.0, 2.0)], dz=200.0)
    assert [centre for centre, _ in result] == [100.0, 700.0]


def test_bin_average_centred_on_grid_points():
    result = bin_average([(310.0, 1.0), (400.0, 2.0), (490.0, 3.0), (510.0, 5.0)], dz=200.0, centred=True)
    assert result == [(400.0, 2.0), (600.0, 5.0)]


def test_bin_average_rejects_bad_width():
    with pytest.raises(ValidationError):
        bin_average([(10.0, 1.0)], dz=0.0)


def test_profile_file_round_trip(tmp_path):
    profile = Cn2Profile(
        np.array([400.0, 600.0, 800.0]),
        np.array([1.234567890123e-16, 0.0, 5e-18]),
        EstimatorConfig(dz=200.0, c=100.0, wavelength=1.55),
        provenance="07145@2020-01-01T00:00:00",
    )
    path = write_cn2_profile(profile, tmp_path / "p_cn2.csv")
    assert path.read_text().splitlines()[0] == "altitude_m,cn2_m_23"
    assert json.loads((tmp_path / "p_cn2.json").read_text())["config"]["c"] == 100.0  # noqa: PLR2004

    loaded = read_cn2_profile(path)
    np.testing.assert_array_equal(loaded.cn2, profile.cn2)
    assert loaded.config == profile.config
    assert loaded.provenance == profile.provenance


def test_profile_file_without_sidecar(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("altitude_m,cn2_m_23\n400,1e-16\n600,2e-16\n800,3e-16\n")
    loaded = read_cn2_profile(path)
    assert loaded.config.dz == 200.0  # noqa: PLR2004
    assert loaded.provenance == "bare"


@pytest.mark.parametrize(
    "content",
    [
        "",
        'altitude_m,cn2_m_23\n400,"1e-16\n',
        "altitude_m,cn2_m_23\n400,high\n",
        b"altitude_m,cn2_m_23\n400,1e-16 \xe9\n",
    ],
)
def test_read_profile_rejects_malformed_csv(tmp_path, content):
    path = tmp_path / "broken_cn2.csv"
    if isinstance(content, bytes):
        path.write_bytes(content)
    else:
        path.write_text(content)
    with pytest.raises(FormatError):
        read_cn2_profile(path)


@pytest.mark.parametrize("sidecar", ["{not json", "[1, 2]", '{"config": {"dz": "wide"}}'])
def test_read_profile_rejects_corrupt_sidecar(tmp_path, sidecar):
    path = tmp_path / "p_cn2.csv"
    path.write_text("altitude_m,cn2_m_23\n400,1e-16\n600,2e-16\n")
    (tmp_path / "p_cn2.json").write_text(sidecar)
    with pytest.raises(FormatError):
        read_cn2_profile(path)
