"""Resampling, optical refractive index and fluctuation extraction."""

import logging
import math
from dataclasses import dataclass
from typing import TextIO

import numpy as np
import numpy.typing as npt
import pandas as pd

from common.errors import InsufficientDataError, InsufficientSpanError, ValidationError
from sounding.sounding import SoundingProfile

logger = logging.getLogger(__name__)

# Coefficients of the optical refractive index, K/hPa.
EXACT_COEFF = 77.6e-6
DISPERSION_COEFF = 7.52e-3
APPROX_COEFF = 79e-6

# Relative slack when snapping altitudes onto the grid.
GRID_TOLERANCE = 1e-9


def refractive_index(
    pressure: float | npt.ArrayLike, temperature: float | npt.ArrayLike, wavelength: float | None = None
) -> float | npt.NDArray[np.float64]:
    """Optical refractive index from pressure [hPa] and temperature [K].

    With a wavelength [µm] the dispersive form
    ``1 + 77.6e-6 (1 + 7.52e-3 λ⁻²) p/T`` is used, otherwise the 0.5 µm
    approximation ``1 + 79e-6 p/T``.
    """
    p = np.asarray(pressure, dtype=float)
    t = np.asarray(temperature, dtype=float)
    if np.any(p < 0) or np.any(t <= 0):
        msg = "Pressure must be non-negative and temperature positive"
        raise ValidationError(msg)
    if wavelength is None:
        coeff = APPROX_COEFF
    else:
        if wavelength <= 0:
            msg = f"Wavelength must be positive, got {wavelength} µm"
            raise ValidationError(msg)
        coeff = EXACT_COEFF * (1 + DISPERSION_COEFF / wavelength**2)

    n = 1.0 + coeff * p / t
    return float(n) if n.ndim == 0 else n


@dataclass(frozen=True, eq=False)
class UniformProfile:
    """Refractive index on the grid ``z0 + i*dz``, with the resampled p and T."""

    z0: float
    dz: float
    n: npt.NDArray[np.float64]
    pressure: npt.NDArray[np.float64] | None = None
    temperature: npt.NDArray[np.float64] | None = None
    wavelength: float | None = None

    def __post_init__(self) -> None:
        if self.dz <= 0:
            msg = f"Grid spacing must be positive, got {self.dz}"
            raise ValidationError(msg)

    def __len__(self) -> int:
        return len(self.n)

    @property
    def altitudes(self) -> npt.NDArray[np.float64]:
        return self.z0 + np.arange(len(self.n)) * self.dz

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"z_m": self.altitudes, "n": self.n})

    def write(self, stream: TextIO) -> None:
        """Write the debug CSV ``z_m,n``."""
        self.to_frame().to_csv(stream, index=False, lineterminator="\n", float_format="%.12g")


@dataclass(frozen=True, eq=False)
class FluctuationProfile:
    """Refractive-index fluctuations n1 = n - n0 on a uniform grid.

    ``n1`` holds NaN outside ``valid_range`` (start inclusive, stop exclusive).
    """

    grid: UniformProfile
    n1: npt.NDArray[np.float64]
    valid_range: tuple[int, int]
    omega: int = 0

    @property
    def dz(self) -> float:
        return self.grid.dz

    @property
    def altitudes(self) -> npt.NDArray[np.float64]:
        return self.grid.altitudes

    @property
    def valid_values(self) -> npt.NDArray[np.float64]:
        start, stop = self.valid_range
        return self.n1[start:stop]


@dataclass(frozen=True)
class TemperatureInversion:
    """Layer where temperature increases with height."""

    z_base: float
    z_top: float
    strength: float


def resample_profile(
    profile: SoundingProfile | UniformProfile,
    dz: float,
    z_start: float | None = None,
    wavelength: float | None = None,
) -> UniformProfile:
    """Resample pressure and temperature onto a uniform grid, then compute n.

    Pressure and temperature are interpolated linearly and independently. The
    grid starts at ``z_start`` (default: first altitude rounded up to a
    multiple of ``dz``; for a UniformProfile, its own ``z0``) and never
    extends beyond the measured range.

    Raises:
        InsufficientSpanError: If the measured span is shorter than ``2*dz``.
    """
    if dz <= 0:
        msg = f"Grid spacing must be positive, got {dz}"
        raise ValidationError(msg)

    if isinstance(profile, UniformProfile):
        if profile.pressure is None or profile.temperature is None:
            msg = "Resampling a uniform profile requires its pressure and temperature"
            raise ValidationError(msg)
        z, p, t = profile.altitudes, profile.pressure, profile.temperature
        if z_start is None:
            z_start = profile.z0
    else:
        if len(profile.levels) < 2:  # noqa: PLR2004
            msg = "Resampling needs at least 2 levels"
            raise InsufficientDataError(msg)
        z, p, t = profile.altitudes, profile.pressures, profile.temperatures

    z_first, z_last = float(z[0]), float(z[-1])
    if z_last - z_first < 2 * dz:
        msg = f"Profile spans {z_last - z_first:.1f} m, shorter than 2*dz = {2 * dz} m"
        raise InsufficientSpanError(msg)

    if z_start is None:
        z_start = math.ceil(z_first / dz - GRID_TOLERANCE) * dz
        z_start = max(z_start, z_first)
    elif z_start < z_first - GRID_TOLERANCE * dz:
        msg = f"Grid start {z_start} m lies below the first measured altitude {z_first} m"
        raise ValidationError(msg)

    count = math.floor((z_last - z_start) / dz + GRID_TOLERANCE) + 1
    if count < 2:  # noqa: PLR2004
        msg = f"Grid from {z_start} m with dz={dz} m holds fewer than 2 points"
        raise InsufficientSpanError(msg)

    grid = z_start + np.arange(count) * dz
    grid = np.minimum(grid, z_last)
    p_grid = np.interp(grid, z, p)
    t_grid = np.interp(grid, z, t)
    n = refractive_index(p_grid, t_grid, wavelength)
    logger.debug(f"Resampled {len(z)} levels onto {count} points (z0={z_start} m, dz={dz} m)")
    return UniformProfile(
        z0=float(z_start),
        dz=float(dz),
        n=np.asarray(n, dtype=float),
        pressure=p_grid,
        temperature=t_grid,
        wavelength=wavelength,
    )


def window_mean(series: npt.ArrayLike, omega: int) -> npt.NDArray[np.float64]:
    """Centred moving mean over ``2*omega + 1`` samples.

    The first and last ``omega`` entries have no full window and are NaN.

    Raises:
        InsufficientDataError: If the series is shorter than ``2*omega + 1``.
    """
    values = np.asarray(series, dtype=float)
    if omega < 1:
        msg = f"Window half-width must be a positive integer, got {omega}"
        raise ValidationError(msg)
    width = 2 * omega + 1
    if values.size < width:
        msg = f"Series of length {values.size} is shorter than the window ({width})"
        raise InsufficientDataError(msg)

    out = np.full(values.shape, np.nan)
    out[omega : values.size - omega] = np.lib.stride_tricks.sliding_window_view(values, width).mean(axis=1)
    return out


def extract_fluctuations(profile: UniformProfile, omega: int) -> FluctuationProfile:
    """Subtract the local window mean from the refractive index."""
    n0 = window_mean(profile.n, omega)
    return FluctuationProfile(
        grid=profile,
        n1=profile.n - n0,
        valid_range=(omega, len(profile) - omega),
        omega=omega,
    )


def find_temperature_inversions(profile: UniformProfile, min_strength: float = 0.5) -> list[TemperatureInversion]:
    """Locate layers where temperature increases with altitude.

    Args:
        profile: Resampled profile carrying temperatures.
        min_strength: Minimum total temperature increase [K] for a layer to count.

    Returns:
        Inversions ordered by altitude.
    """
    if profile.temperature is None:
        msg = "Inversion search requires resampled temperatures"
        raise ValidationError(msg)

    t = profile.temperature
    z = profile.altitudes
    rising = np.diff(t) > 0
    inversions = []
    i = 0
    while i < rising.size:
        if not rising[i]:
            i += 1
            continue
        j = i
        while j < rising.size and rising[j]:
            j += 1
        strength = float(t[j] - t[i])
        if strength >= min_strength:
            inversions.append(TemperatureInversion(float(z[i]), float(z[j]), strength))
        i = j
    return inversions
