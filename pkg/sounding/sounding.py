"""Radiosonde and thermosonde ingestion.

Two sounding layouts are understood:

* ``csv``: one header line naming ``altitude_m``, ``pressure_hPa`` and either
  ``temperature_K`` or ``temperature_C``; optional ``rh_pct``, ``wind_ms`` and
  ``wind_deg`` columns are accepted and ignored.
* ``uwyo``: the University of Wyoming TEXT:LIST listing. A dashed rule, a
  header line (``PRES HGHT TEMP DWPT ...``), a unit line and another dashed
  rule precede 7-character wide columns. ``HGHT`` is metres above sea level
  and ``TEMP`` is in degrees Celsius. A ``Station elevation:`` line in the
  indices block, when present, sets the station elevation.

The temperature unit always comes from the header, never from the values.
"""

import io
import json
import logging
import re
from dataclasses import dataclass, replace
from datetime import datetime
from enum import StrEnum
from functools import cached_property
from pathlib import Path
from typing import Literal, TextIO

import numpy as np
import numpy.typing as npt
import pandas as pd

from common.errors import FormatError, InsufficientDataError, ValidationError

logger = logging.getLogger(__name__)

ALTITUDE = "altitude_m"
PRESSURE = "pressure_hPa"
TEMPERATURE_K = "temperature_K"
TEMPERATURE_C = "temperature_C"
CT2 = "ct2_K2m23"
OPTIONAL_COLUMNS = ("rh_pct", "wind_ms", "wind_deg")

CELSIUS_OFFSET = 273.15
MAX_TEMPERATURE_K = 400.0
DEFAULT_CEILING_M = 30_000.0
MIN_LEVELS = 10
UWYO_COLUMN_WIDTH = 7

# Refractivity coefficient of the approximate optical index, K/hPa.
N_COEFF = 79e-6


class AltitudeReference(StrEnum):
    ABOVE_GROUND = "above_ground"
    ABOVE_SEA_LEVEL = "above_sea_level"


@dataclass(frozen=True)
class LevelRecord:
    """One measured level: altitude [m], pressure [hPa], temperature [K]."""

    altitude: float
    pressure: float
    temperature: float

    def __post_init__(self) -> None:
        if self.altitude < 0:
            msg = f"Altitude must be non-negative, got {self.altitude} m"
            raise ValidationError(msg)
        if self.pressure <= 0:
            msg = f"Pressure must be positive, got {self.pressure} hPa"
            raise ValidationError(msg)
        if not 0 < self.temperature <= MAX_TEMPERATURE_K:
            msg = f"Temperature must be in (0, {MAX_TEMPERATURE_K}] K, got {self.temperature} K"
            raise ValidationError(msg)


@dataclass(frozen=True)
class StationMetadata:
    """Content of the JSON sidecar shipped with a sounding file."""

    station_id: str
    lat: float | None = None
    lon: float | None = None
    elevation_m: float = 0.0
    launch_time: datetime | None = None


@dataclass(frozen=True)
class SoundingFormat:
    """Describes how to read a sounding stream.

    Attributes:
        kind: ``csv`` or ``uwyo``.
        ceiling_m: Altitude above ground a complete ascent must reach.
        min_levels: Minimum number of valid levels.
        metadata: Station information, usually read from the sidecar JSON.
    """

    kind: Literal["csv", "uwyo"] = "csv"
    ceiling_m: float = DEFAULT_CEILING_M
    min_levels: int = MIN_LEVELS
    metadata: StationMetadata | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("csv", "uwyo"):
            msg = f"Unknown sounding format '{self.kind}'"
            raise FormatError(msg)
        if self.ceiling_m < 0:
            msg = f"Ceiling must be non-negative, got {self.ceiling_m}"
            raise ValidationError(msg)


@dataclass(frozen=True)
class SoundingProfile:
    """Levels of one radiosonde ascent, strictly increasing in altitude."""

    station_id: str
    launch_time: datetime | None
    levels: tuple[LevelRecord, ...]
    altitude_reference: AltitudeReference = AltitudeReference.ABOVE_GROUND
    station_elevation: float = 0.0
    reaches_ceiling: bool = True
    dropped_rows: int = 0
    collapsed_duplicates: int = 0

    @cached_property
    def altitudes(self) -> npt.NDArray[np.float64]:
        return np.array([level.altitude for level in self.levels], dtype=float)

    @cached_property
    def pressures(self) -> npt.NDArray[np.float64]:
        return np.array([level.pressure for level in self.levels], dtype=float)

    @cached_property
    def temperatures(self) -> npt.NDArray[np.float64]:
        return np.array([level.temperature for level in self.levels], dtype=float)

    @property
    def top(self) -> float:
        """Highest altitude above ground reached by the ascent."""
        top = self.levels[-1].altitude
        if self.altitude_reference is AltitudeReference.ABOVE_SEA_LEVEL:
            top -= self.station_elevation
        return top

    def above_ground(self) -> "SoundingProfile":
        """Return the profile with altitudes measured above the station.

        Levels below the station elevation are discarded.
        """
        if self.altitude_reference is AltitudeReference.ABOVE_GROUND:
            return self
        levels = tuple(
            LevelRecord(level.altitude - self.station_elevation, level.pressure, level.temperature)
            for level in self.levels
            if level.altitude >= self.station_elevation
        )
        return replace(self, levels=levels, altitude_reference=AltitudeReference.ABOVE_GROUND)


@dataclass(frozen=True)
class ThermosondeProfile:
    """Temperature structure parameter C_T² [K² m^-2/3] versus altitude [m]."""

    altitudes: tuple[float, ...]
    ct2: tuple[float, ...]
    sensor_spacing: float = 1.0
    warnings: int = 0

    def __post_init__(self) -> None:
        if self.sensor_spacing <= 0:
            msg = f"Sensor spacing must be positive, got {self.sensor_spacing} m"
            raise ValidationError(msg)
        if any(value < 0 for value in self.ct2):
            msg = "C_T² must be non-negative at every level"
            raise ValidationError(msg)


def read_metadata(path: Path | str) -> StationMetadata:
    """Read a metadata sidecar JSON file.

    Args:
        path: Path to the JSON file.

    Returns:
        The station metadata.

    Raises:
        FormatError: If the file is not valid JSON or lacks ``station_id``.
    """
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        msg = f"Metadata file {path} is not valid JSON: {exc}"
        raise FormatError(msg) from exc

    if not isinstance(raw, dict) or "station_id" not in raw:
        msg = f"Metadata file {path} must be an object with a 'station_id' key"
        raise FormatError(msg)

    launch_time = raw.get("launch_time")
    try:
        return StationMetadata(
            station_id=str(raw["station_id"]),
            lat=_optional_float(raw.get("lat")),
            lon=_optional_float(raw.get("lon")),
            elevation_m=float(raw.get("elevation_m") or 0.0),
            launch_time=datetime.fromisoformat(launch_time) if launch_time else None,
        )
    except (TypeError, ValueError) as exc:
        msg = f"Metadata file {path} has an invalid value: {exc}"
        raise FormatError(msg) from exc


def read_text(path: Path | str) -> str:
    """Read a UTF-8 input file.

    Raises:
        FormatError: If the file is not UTF-8 text.
    """
    try:
        return Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        msg = f"{path} is not UTF-8 text: {exc}"
        raise FormatError(msg) from exc


def _optional_float(value: object) -> float | None:
    return None if value is None else float(value)  # type: ignore[arg-type]


def parse_sounding(stream: TextIO, fmt: SoundingFormat | None = None) -> SoundingProfile:
    """Parse a sounding stream into a validated, sorted profile.

    Rows with a missing mandatory field are dropped and counted. Levels that
    share an altitude are collapsed to their mean.

    Args:
        stream: Text stream holding the sounding.
        fmt: Layout and validation settings.

    Returns:
        The sounding profile, flagged with ``reaches_ceiling``.

    Raises:
        FormatError: On a malformed header or layout.
        ValidationError: On a non-physical value, naming the offending row.
        InsufficientDataError: If fewer than ``fmt.min_levels`` valid levels remain.
    """
    fmt = fmt or SoundingFormat()
    text = stream.read()
    if fmt.kind == "csv":
        frame, first_line = _read_csv_frame(text)
        reference = AltitudeReference.ABOVE_GROUND
        elevation = fmt.metadata.elevation_m if fmt.metadata else 0.0
    else:
        frame, first_line, found_elevation = _read_uwyo_frame(text)
        reference = AltitudeReference.ABOVE_SEA_LEVEL
        if fmt.metadata is not None:
            elevation = fmt.metadata.elevation_m
        else:
            elevation = found_elevation if found_elevation is not None else 0.0

    total = len(frame)
    frame = frame.dropna()
    dropped = total - len(frame)
    if dropped:
        logger.warning(f"Dropped {dropped} row(s) with missing mandatory fields")

    _check_physical(frame, first_line)

    grouped = frame.groupby(ALTITUDE, sort=True).mean()
    collapsed = len(frame) - len(grouped)
    if collapsed:
        logger.warning(f"Collapsed {collapsed} duplicate-altitude row(s) to their mean")

    if len(grouped) < fmt.min_levels:
        msg = f"Sounding has {len(grouped)} valid levels, at least {fmt.min_levels} required"
        raise InsufficientDataError(msg)

    levels = tuple(
        LevelRecord(float(z), float(row[PRESSURE]), float(row[TEMPERATURE_K])) for z, row in grouped.iterrows()
    )
    profile = SoundingProfile(
        station_id=fmt.metadata.station_id if fmt.metadata else "unknown",
        launch_time=fmt.metadata.launch_time if fmt.metadata else None,
        levels=levels,
        altitude_reference=reference,
        station_elevation=elevation,
        dropped_rows=dropped,
        collapsed_duplicates=collapsed,
    )
    reaches = profile.top >= fmt.ceiling_m
    if not reaches:
        logger.info(f"Sounding tops at {profile.top:.0f} m, below the {fmt.ceiling_m:.0f} m ceiling")
    return replace(profile, reaches_ceiling=reaches)


def _read_csv_frame(text: str) -> tuple[pd.DataFrame, int]:
    """Read the CSV layout into altitude/pressure/temperature_K columns.

    Returns:
        The frame and the file line number of its first data row.
    """
    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, skipinitialspace=True, keep_default_na=False)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        msg = f"Malformed sounding CSV: {exc}"
        raise FormatError(msg) from exc

    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in (ALTITUDE, PRESSURE) if c not in frame.columns]
    has_k, has_c = TEMPERATURE_K in frame.columns, TEMPERATURE_C in frame.columns
    if missing or has_k == has_c:
        msg = (
            f"Malformed sounding header {list(frame.columns)}: expected {ALTITUDE}, {PRESSURE} "
            f"and exactly one of {TEMPERATURE_K} / {TEMPERATURE_C}"
        )
        raise FormatError(msg)

    temperature = TEMPERATURE_K if has_k else TEMPERATURE_C
    numeric = pd.DataFrame(
        {
            ALTITUDE: _to_float(frame[ALTITUDE]),
            PRESSURE: _to_float(frame[PRESSURE]),
            TEMPERATURE_K: _to_float(frame[temperature]),
        }
    )
    if has_c:
        numeric[TEMPERATURE_K] = numeric[TEMPERATURE_K] + CELSIUS_OFFSET
    return numeric, 2


def _to_float(column: pd.Series) -> pd.Series:
    # float() is correctly rounded, so the canonical writer round-trips exactly.
    def convert(value: str) -> float:
        try:
            return float(value)
        except ValueError:
            return float("nan")

    return column.map(convert).astype(float)


def _read_uwyo_frame(text: str) -> tuple[pd.DataFrame, int, float | None]:
    """Read the UWYO TEXT:LIST layout.

    Returns:
        The frame, the line number of its first data row and the station
        elevation found in the indices block, if any.
    """
    lines = text.splitlines()
    header_idx = next(
        (i for i, line in enumerate(lines) if {"PRES", "HGHT", "TEMP"} <= set(line.split())),
        None,
    )
    if header_idx is None:
        msg = "Fixed-width sounding lacks a 'PRES HGHT TEMP' header line"
        raise FormatError(msg)

    columns = lines[header_idx].split()
    rules = [i for i in range(header_idx + 1, len(lines)) if lines[i].strip().startswith("---")]
    if not rules:
        msg = "Fixed-width sounding lacks the dashed rule closing its header"
        raise FormatError(msg)

    start = rules[0] + 1
    stop = start
    while stop < len(lines) and lines[stop].strip() and re.match(r"^\s*-?\d", lines[stop]):
        stop += 1

    frame = pd.read_fwf(
        io.StringIO("\n".join(lines[start:stop])),
        widths=[UWYO_COLUMN_WIDTH] * len(columns),
        names=columns,
        header=None,
        dtype=str,
    )
    numeric = pd.DataFrame(
        {
            ALTITUDE: _to_float(frame["HGHT"].fillna("")),
            PRESSURE: _to_float(frame["PRES"].fillna("")),
            TEMPERATURE_K: _to_float(frame["TEMP"].fillna("")) + CELSIUS_OFFSET,
        }
    )

    elevation = None
    for line in lines[stop:]:
        match = re.match(r"^\s*Station elevation:\s*(-?[\d.]+)", line)
        if match:
            elevation = float(match.group(1))
            break
    return numeric, start + 1, elevation


def _check_physical(frame: pd.DataFrame, first_line: int) -> None:
    """Raise a ValidationError naming the first non-physical row."""
    bad = (
        (frame[PRESSURE] <= 0)
        | (frame[TEMPERATURE_K] <= 0)
        | (frame[TEMPERATURE_K] > MAX_TEMPERATURE_K)
        | (frame[ALTITUDE] < 0)
    )
    if bad.any():
        idx = int(bad.idxmax())
        row = frame.loc[idx]
        msg = (
            f"Non-physical values in row {idx + first_line}: altitude={row[ALTITUDE]} m, "
            f"pressure={row[PRESSURE]} hPa, temperature={row[TEMPERATURE_K]} K"
        )
        raise ValidationError(msg)


def write_sounding(profile: SoundingProfile, stream: TextIO) -> None:
    """Write the canonical CSV form of a profile (kelvin, repr floats)."""
    stream.write(f"{ALTITUDE},{PRESSURE},{TEMPERATURE_K}\n")
    for level in profile.levels:
        stream.write(f"{level.altitude!r},{level.pressure!r},{level.temperature!r}\n")


def parse_thermosonde(stream: TextIO, sensor_spacing: float = 1.0) -> ThermosondeProfile:
    """Parse a thermosonde C_T² CSV (``altitude_m,ct2_K2m23``).

    Unsorted altitudes are sorted and duplicates collapsed to their mean; each
    fix-up increments the warning count.

    Raises:
        FormatError: On a malformed header.
        InsufficientDataError: If the file holds no valid row.
        ValidationError: On a negative C_T².
    """
    try:
        frame = pd.read_csv(stream, dtype=str, skipinitialspace=True, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        msg = "Thermosonde file is empty"
        raise InsufficientDataError(msg) from exc
    except pd.errors.ParserError as exc:
        msg = f"Malformed thermosonde CSV: {exc}"
        raise FormatError(msg) from exc

    frame.columns = [str(c).strip() for c in frame.columns]
    if ALTITUDE not in frame.columns or CT2 not in frame.columns:
        msg = f"Malformed thermosonde header {list(frame.columns)}: expected {ALTITUDE},{CT2}"
        raise FormatError(msg)

    numeric = pd.DataFrame({ALTITUDE: _to_float(frame[ALTITUDE]), CT2: _to_float(frame[CT2])}).dropna()
    if numeric.empty:
        msg = "Thermosonde file holds no valid level"
        raise InsufficientDataError(msg)

    negative = numeric[CT2] < 0
    if negative.any():
        idx = int(negative.idxmax())
        msg = f"Negative C_T² in row {idx + 2}: {numeric.loc[idx, CT2]}"
        raise ValidationError(msg)

    warnings = 0
    descending = int((numeric[ALTITUDE].diff() < 0).sum())
    if descending:
        logger.warning(f"Thermosonde altitudes unsorted at {descending} row(s); sorting")
        warnings += descending

    grouped = numeric.groupby(ALTITUDE, sort=True)[CT2].mean()
    collapsed = len(numeric) - len(grouped)
    if collapsed:
        logger.warning(f"Collapsed {collapsed} duplicate thermosonde altitude(s) to their mean")
        warnings += collapsed

    return ThermosondeProfile(
        altitudes=tuple(float(z) for z in grouped.index),
        ct2=tuple(float(v) for v in grouped.to_numpy()),
        sensor_spacing=sensor_spacing,
        warnings=warnings,
    )


def ct2_to_cn2(
    ct2: float | npt.ArrayLike, pressure: float | npt.ArrayLike, temperature: float | npt.ArrayLike
) -> float | npt.NDArray[np.float64]:
    """Convert C_T² to C_n² with the pressure [hPa] and temperature [K].

    C_n² = (79e-6 p / T²)² C_T², from the temperature derivative of the
    approximate optical index.

    Raises:
        ValidationError: On negative C_T² or non-positive p or T.
    """
    ct2_arr = np.asarray(ct2, dtype=float)
    p = np.asarray(pressure, dtype=float)
    t = np.asarray(temperature, dtype=float)
    if np.any(ct2_arr < 0):
        msg = "C_T² must be non-negative"
        raise ValidationError(msg)
    if np.any(p <= 0) or np.any(t <= 0):
        msg = "Pressure and temperature must be positive"
        raise ValidationError(msg)

    result = (N_COEFF * p / t**2) ** 2 * ct2_arr
    return float(result) if result.ndim == 0 else result


def thermosonde_cn2(
    thermo: ThermosondeProfile, sounding: SoundingProfile
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Convert every thermosonde level to C_n² using the companion radiosonde.

    Pressure and temperature are interpolated linearly in altitude from the
    sounding; thermosonde levels outside the sounding range are dropped. Both
    profiles must use the same altitude reference.

    Returns:
        Altitudes and C_n² values of the retained levels.
    """
    z = np.asarray(thermo.altitudes, dtype=float)
    inside = (z >= sounding.altitudes[0]) & (z <= sounding.altitudes[-1])
    if not inside.all():
        logger.warning(f"Dropped {int((~inside).sum())} thermosonde level(s) outside the sounding range")
    z = z[inside]
    if z.size == 0:
        msg = "No thermosonde level lies inside the radiosonde altitude range"
        raise InsufficientDataError(msg)

    p = np.interp(z, sounding.altitudes, sounding.pressures)
    t = np.interp(z, sounding.altitudes, sounding.temperatures)
    cn2 = ct2_to_cn2(np.asarray(thermo.ct2, dtype=float)[inside], p, t)
    return z, np.atleast_1d(np.asarray(cn2, dtype=float))
