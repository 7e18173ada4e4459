"""C_n² estimation from refractive-index fluctuations.

The estimate at grid index ``i`` uses the three points ``i-m``, ``i`` and
``i+m`` (separation ``δ = m·dz``): each pairwise squared difference is
normalised by its separation to the 2/3 power (``δ`` for the two adjacent
pairs, ``2δ`` for the outer pair), the three values are averaged and the
result is multiplied by the scale factor ``c``.
"""

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields
from io import StringIO
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import pandas as pd

from common.errors import (
    AlignmentError,
    FormatError,
    GridMismatchError,
    InsufficientDataError,
    ValidationError,
)
from common.helpers import atomic_write_text
from prep.prep import FluctuationProfile, extract_fluctuations, resample_profile
from sounding.sounding import SoundingProfile, read_text

logger = logging.getLogger(__name__)

TWO_THIRDS = 2.0 / 3.0
GRID_TOLERANCE = 1e-6
DEFAULT_MIN_FRACTION = 0.8

ALTITUDE = "altitude_m"
CN2 = "cn2_m_23"

# Calibrated scale factors for radiosonde profiles, keyed by (dz [m], omega, m).
TABLE_SCALE_FACTORS: dict[tuple[int, int, int], float] = {
    (25, 1, 1): 10.0,
    (25, 2, 1): 12.5,
    (25, 2, 2): 15.0,
    (50, 1, 1): 18.0,
    (50, 2, 1): 25.0,
    (50, 2, 2): 30.0,
    (100, 1, 1): 35.0,
    (100, 2, 1): 50.0,
    (100, 2, 2): 60.0,
    (200, 1, 1): 75.0,
    (200, 2, 1): 100.0,
    (200, 2, 2): 120.0,
    (400, 1, 1): 130.0,
    (400, 2, 1): 200.0,
    (400, 2, 2): 210.0,
}


def lookup_scale_factor(dz: float, omega: int, m: int) -> float | None:
    """Published radiosonde scale factor for ``(dz, omega, m)``, if tabulated."""
    if not float(dz).is_integer():
        return None
    return TABLE_SCALE_FACTORS.get((int(dz), omega, m))


@dataclass(frozen=True)
class EstimatorConfig:
    """Tunables of the estimation chain.

    Attributes:
        dz: Grid spacing [m].
        omega: Half-width of the window mean, in grid points.
        m: Separation of the three-point estimate, in grid points (δ = m·dz).
        c: Scale factor.
        wavelength: Wavelength [µm] for the dispersive index, None for the
            0.5 µm approximation.
    """

    dz: float
    omega: int = 2
    m: int = 1
    c: float = 1.0
    wavelength: float | None = None

    def __post_init__(self) -> None:
        if self.dz <= 0:
            msg = f"dz must be positive, got {self.dz}"
            raise ValidationError(msg)
        if self.omega < 1 or self.m < 1:
            msg = f"omega and m must be positive integers, got omega={self.omega}, m={self.m}"
            raise ValidationError(msg)
        if self.c <= 0:
            msg = f"Scale factor must be positive, got {self.c}"
            raise ValidationError(msg)
        if self.wavelength is not None and self.wavelength <= 0:
            msg = f"Wavelength must be positive, got {self.wavelength}"
            raise ValidationError(msg)

    @property
    def delta(self) -> float:
        return self.m * self.dz

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Cn2Profile:
    """C_n² [m^-2/3] on a uniform altitude grid [m]."""

    altitudes: npt.NDArray[np.float64]
    cn2: npt.NDArray[np.float64]
    config: EstimatorConfig
    provenance: str = ""
    profile_count: int = 1
    dropped_levels: int = 0

    def __post_init__(self) -> None:
        if len(self.altitudes) != len(self.cn2):
            msg = f"{len(self.altitudes)} altitudes but {len(self.cn2)} C_n² values"
            raise ValidationError(msg)

    def __len__(self) -> int:
        return len(self.cn2)

    def scaled(self, factor: float) -> "Cn2Profile":
        """Return the profile multiplied by ``factor``, with the config's c updated."""
        config = EstimatorConfig(**{**self.config.to_dict(), "c": self.config.c * factor})
        return Cn2Profile(
            self.altitudes.copy(), self.cn2 * factor, config, self.provenance, self.profile_count, self.dropped_levels
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({ALTITUDE: self.altitudes, CN2: self.cn2})

    def metadata(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "provenance": self.provenance,
            "profile_count": self.profile_count,
            "dropped_levels": self.dropped_levels,
        }


def write_cn2_profile(profile: Cn2Profile, path: Path | str) -> Path:
    """Write ``altitude_m,cn2_m_23`` CSV plus a ``.json`` sidecar with the config."""
    path = Path(path)
    atomic_write_text(path, profile.to_frame().to_csv(index=False, lineterminator="\n"))
    atomic_write_text(path.with_suffix(".json"), json.dumps(profile.metadata(), indent=2))
    return path


def read_cn2_profile(path: Path | str) -> Cn2Profile:
    """Read a profile written by :func:`write_cn2_profile`.

    Without a sidecar, dz is inferred from the altitude spacing and the other
    settings take their defaults.

    Raises:
        FormatError: On an empty or malformed CSV or sidecar.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(StringIO(read_text(path)), float_precision="round_trip")
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        msg = f"{path}: malformed profile CSV: {exc}"
        raise FormatError(msg) from exc
    if ALTITUDE not in frame.columns or CN2 not in frame.columns:
        msg = f"{path}: expected columns {ALTITUDE},{CN2}, got {list(frame.columns)}"
        raise FormatError(msg)
    try:
        altitudes = frame[ALTITUDE].to_numpy(dtype=float)
        cn2 = frame[CN2].to_numpy(dtype=float)
    except ValueError as exc:
        msg = f"{path}: non-numeric profile value: {exc}"
        raise FormatError(msg) from exc

    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        try:
            meta = json.loads(read_text(sidecar))
        except json.JSONDecodeError as exc:
            msg = f"Profile sidecar {sidecar} is not valid JSON: {exc}"
            raise FormatError(msg) from exc
        if not isinstance(meta, dict) or not isinstance(meta.get("config", {}), dict):
            msg = f"Profile sidecar {sidecar} must be an object with a 'config' object"
            raise FormatError(msg)
        names = {f.name for f in fields(EstimatorConfig)}
        try:
            config = EstimatorConfig(**{k: v for k, v in meta.get("config", {}).items() if k in names})
            return Cn2Profile(
                altitudes,
                cn2,
                config,
                provenance=meta.get("provenance", path.stem),
                profile_count=int(meta.get("profile_count", 1)),
                dropped_levels=int(meta.get("dropped_levels", 0)),
            )
        except (TypeError, ValueError) as exc:
            msg = f"Profile sidecar {sidecar} has an invalid value: {exc}"
            raise FormatError(msg) from exc

    if altitudes.size < 2:  # noqa: PLR2004
        msg = f"{path}: cannot infer dz from fewer than 2 levels and no sidecar"
        raise InsufficientDataError(msg)
    logger.warning(f"{path}: no sidecar found, inferring dz from the altitude grid")
    return Cn2Profile(altitudes, cn2, EstimatorConfig(dz=float(np.median(np.diff(altitudes)))), provenance=path.stem)


def _grid_steps(separation: float, dz: float) -> int:
    k = separation / dz
    steps = round(k)
    if steps < 1 or abs(k - steps) > GRID_TOLERANCE * max(1.0, k):
        msg = f"Separation {separation} m is not a positive multiple of dz={dz} m"
        raise AlignmentError(msg)
    return steps


def empirical_structure_function(
    n1: FluctuationProfile, separations: Iterable[float]
) -> list[tuple[float, float]]:
    """Spatially averaged ``<(n1(z+ρ) - n1(z))²>`` over the valid range.

    Raises:
        AlignmentError: If a separation is not a positive multiple of dz.
        InsufficientDataError: If a separation exceeds the valid span.
    """
    values = n1.valid_values
    result = []
    for rho in separations:
        steps = _grid_steps(rho, n1.dz)
        if steps >= values.size:
            msg = f"Separation {rho} m exceeds the valid span of {values.size} points"
            raise InsufficientDataError(msg)
        diffs = values[steps:] - values[:-steps]
        result.append((float(rho), float(np.mean(diffs**2))))
    return result


def estimate_cn2(n1: FluctuationProfile, config: EstimatorConfig, provenance: str = "") -> Cn2Profile:
    """Three-point C_n² estimate at every valid centre of the fluctuation profile.

    The first output altitude is ``δ + ω·dz`` above the first grid point.

    Raises:
        InsufficientDataError: If the valid range spans fewer than ``2m + 1`` points.
    """
    if abs(n1.dz - config.dz) > GRID_TOLERANCE * config.dz:
        msg = f"Fluctuation grid spacing {n1.dz} m differs from configured dz={config.dz} m"
        raise ValidationError(msg)
    if n1.omega and n1.omega != config.omega:
        msg = f"Fluctuations were extracted with omega={n1.omega}, config says omega={config.omega}"
        raise ValidationError(msg)

    start, stop = n1.valid_range
    m = config.m
    if stop - start < 2 * m + 1:
        msg = f"Valid range holds {stop - start} points, at least {2 * m + 1} required for m={m}"
        raise InsufficientDataError(msg)

    centers = np.arange(start + m, stop - m)
    lower, mid, upper = n1.n1[centers - m], n1.n1[centers], n1.n1[centers + m]
    near = config.delta**TWO_THIRDS
    far = (2 * config.delta) ** TWO_THIRDS
    cn2 = config.c * ((mid - lower) ** 2 / near + (upper - mid) ** 2 / near + (upper - lower) ** 2 / far) / 3.0
    return Cn2Profile(n1.altitudes[centers], cn2, config, provenance)


def compute_cn2(sounding: SoundingProfile, config: EstimatorConfig, z_start: float | None = None) -> Cn2Profile:
    """Run the full chain: resample, refractive index, fluctuations, estimate."""
    uniform = resample_profile(sounding, config.dz, z_start=z_start, wavelength=config.wavelength)
    fluctuations = extract_fluctuations(uniform, config.omega)
    provenance = sounding.station_id
    if sounding.launch_time is not None:
        provenance = f"{provenance}@{sounding.launch_time.isoformat()}"
    profile = estimate_cn2(fluctuations, config, provenance)
    logger.debug(f"Estimated {len(profile)} C_n² levels for {provenance}")
    return profile


def _config_diff(a: EstimatorConfig, b: EstimatorConfig) -> str:
    return ", ".join(
        f"{f.name}: {getattr(a, f.name)!r} != {getattr(b, f.name)!r}"
        for f in fields(EstimatorConfig)
        if getattr(a, f.name) != getattr(b, f.name)
    )


def average_profiles(profiles: Sequence[Cn2Profile], min_fraction: float = DEFAULT_MIN_FRACTION) -> Cn2Profile:
    """Per-altitude arithmetic mean of profiles sharing grid and configuration.

    Profiles may cover different altitude ranges of the same lattice. Levels
    present in fewer than ``min_fraction`` of the profiles are dropped.

    Raises:
        GridMismatchError: If configurations differ or grids are offset.
    """
    if not profiles:
        msg = "Cannot average an empty set of profiles"
        raise InsufficientDataError(msg)
    if not 0 < min_fraction <= 1:
        msg = f"min_fraction must be in (0, 1], got {min_fraction}"
        raise ValidationError(msg)

    reference = profiles[0]
    dz = reference.config.dz
    origin = float(reference.altitudes[0])
    columns = {}
    altitude_of: dict[int, float] = {}
    for idx, profile in enumerate(profiles):
        if profile.config != reference.config:
            diff = _config_diff(reference.config, profile.config)
            msg = f"Profile {idx} ({profile.provenance}) has a different config: {diff}"
            raise GridMismatchError(msg)
        steps = (profile.altitudes - origin) / dz
        keys = np.round(steps).astype(int)
        if np.any(np.abs(steps - keys) > GRID_TOLERANCE):
            msg = f"Profile {idx} ({profile.provenance}) is not on the grid of profile 0"
            raise GridMismatchError(msg)
        for key, z in zip(keys.tolist(), profile.altitudes.tolist(), strict=True):
            altitude_of.setdefault(key, z)
        columns[idx] = pd.Series(profile.cn2, index=keys)

    frame = pd.concat(columns, axis=1).sort_index()
    counts = frame.notna().sum(axis=1)
    keep = counts >= min_fraction * len(profiles) - 1e-12
    mean = frame[keep].mean(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        logger.info(f"Dropped {dropped} level(s) present in fewer than {min_fraction:.0%} of profiles")

    return Cn2Profile(
        altitudes=np.array([altitude_of[k] for k in mean.index], dtype=float),
        cn2=mean.to_numpy(dtype=float),
        config=reference.config,
        provenance=f"mean of {len(profiles)} profiles",
        profile_count=len(profiles),
        dropped_levels=dropped,
    )


def reject_outlier_profiles(
    profiles: Sequence[Cn2Profile], max_decades: float = 2.0
) -> tuple[list[Cn2Profile], list[Cn2Profile]]:
    """Split profiles into kept and rejected by their overall turbulence strength.

    A profile is rejected when its mean log10 C_n² departs from the median over
    all profiles by more than ``max_decades``. Profiles without a positive
    value are rejected too.
    """
    scores = []
    for profile in profiles:
        positive = profile.cn2[profile.cn2 > 0]
        scores.append(float(np.mean(np.log10(positive))) if positive.size else np.nan)
    finite = [s for s in scores if np.isfinite(s)]
    if not finite:
        return [], list(profiles)

    median = float(np.median(finite))
    kept, rejected = [], []
    for profile, score in zip(profiles, scores, strict=True):
        if np.isfinite(score) and abs(score - median) <= max_decades:
            kept.append(profile)
        else:
            logger.warning(f"Rejecting outlier profile {profile.provenance} (mean log10 C_n² {score:.2f})")
            rejected.append(profile)
    return kept, rejected


def bin_average(
    profile: Iterable[tuple[float, float]], dz: float, *, centred: bool = False
) -> list[tuple[float, float]]:
    """Average values over altitude bins ``[k*dz, (k+1)*dz)``.

    Args:
        profile: ``(altitude, value)`` pairs.
        dz: Bin width [m].
        centred: Use bins ``[k*dz - dz/2, k*dz + dz/2)`` centred on the grid points instead.

    Returns:
        ``(bin centre, mean value)`` for every non-empty bin, by altitude.
    """
    if dz <= 0:
        msg = f"Bin width must be positive, got {dz}"
        raise ValidationError(msg)
    pairs = list(profile)
    if not pairs:
        return []
    frame = pd.DataFrame(pairs, columns=["z", "value"])
    shift = 0.5 if centred else 0.0
    bins = np.floor(frame["z"] / dz + shift).astype(int)
    means = frame.groupby(bins)["value"].mean().sort_index()
    return [(float((k + 0.5 - shift) * dz), float(v)) for k, v in means.items()]
