"""Run configuration: built-in defaults, then the YAML file, then flags."""

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from common.errors import ConfigurationError
from common.helpers import get_data_file_path

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_NAME = "cn2profiler.yaml"
DEFAULT_DZ = 200.0
DEFAULT_SYNTH_DZ = 0.1


@dataclass
class RunConfig:
    """Every tunable of every command; the JSON echo of this object reproduces a run."""

    command: str
    inputs: list[str] = field(default_factory=list)
    out: str = "out"
    format: str = "csv"
    verbose: bool = False
    # estimation
    dz: float | None = None
    omega: int = 2
    m: int = 1
    scale_factor: float | None = None
    wavelength: float | None = None
    ceiling: float = 30_000.0
    include_below_ceiling: bool = False
    inversions: bool = False
    inversion_strength: float = 0.5
    # averaging
    min_fraction: float = 0.8
    reject_outliers: float | None = None
    # calibration, comparison and fitting
    band: list[float] = field(default_factory=lambda: [1000.0, 4000.0])
    reference: str = "hv57"
    station_elevation: float | None = None
    init: str = "trappes"
    free: list[str] | None = None
    starts: int = 8
    # synthesis and study
    seed: int = 0
    cn2: float = 1e-16
    L0: float = 100.0
    l0: float = 1e-3
    n0: float = 1.000278
    samples: int = 2**20
    dz_list: list[float] = field(default_factory=lambda: [1.0, 300.0, 600.0, 1200.0])
    L0_list: list[float] = field(default_factory=lambda: [100.0])
    omega_list: list[int] = field(default_factory=lambda: [1, 2])
    m_list: list[int] = field(default_factory=lambda: [1])
    trials: int = 8
    study_samples: int = 2**14

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def grid_spacing(self) -> float:
        """dz for the command, falling back to a per-command default."""
        if self.dz is not None:
            return self.dz
        return DEFAULT_SYNTH_DZ if self.command == "synth" else DEFAULT_DZ

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


FLOAT_KEYS = {
    "dz",
    "scale_factor",
    "wavelength",
    "ceiling",
    "inversion_strength",
    "min_fraction",
    "reject_outliers",
    "station_elevation",
    "cn2",
    "L0",
    "l0",
    "n0",
}
INT_KEYS = {"omega", "m", "starts", "seed", "samples", "trials", "study_samples"}
BOOL_KEYS = {"verbose", "include_below_ceiling", "inversions"}
FLOAT_LIST_KEYS = {"band", "dz_list", "L0_list"}
INT_LIST_KEYS = {"omega_list", "m_list"}
STR_LIST_KEYS = {"free"}
RESERVED_KEYS = {"command", "inputs"}


def _split(value: Any) -> list[Any]:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def coerce(key: str, value: Any) -> Any:
    """Convert a raw flag or YAML value to the type of the config field."""
    if value is None:
        return None
    try:
        if key in FLOAT_KEYS:
            return float(value)
        if key in INT_KEYS:
            return int(value)
        if key in BOOL_KEYS:
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if key in FLOAT_LIST_KEYS:
            return [float(v) for v in _split(value)]
        if key in INT_LIST_KEYS:
            return [int(v) for v in _split(value)]
        if key in STR_LIST_KEYS:
            return [str(v) for v in _split(value)]
    except (TypeError, ValueError) as exc:
        msg = f"Invalid value for '{key}': {value!r}"
        raise ConfigurationError(msg) from exc
    return str(value)


def load_config_file(path: Path | str | None) -> dict[str, Any]:
    """Load the YAML key-value file.

    Args:
        path: Explicit file; None uses ``data/cn2profiler.yaml`` when it exists.

    Returns:
        The raw mapping, empty when no file applies.

    Raises:
        ConfigurationError: If an explicit file is missing or the YAML is not a mapping.
    """
    if path is None:
        default = get_data_file_path(DEFAULT_CONFIG_NAME)
        if not default.exists():
            return {}
        path = default
    path = Path(path)
    if not path.exists():
        msg = f"Config file not found: {path}"
        raise ConfigurationError(msg)

    with open(path, encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            msg = f"Config file {path} is not valid YAML: {exc}"
            raise ConfigurationError(msg) from exc
    if not isinstance(raw, dict):
        msg = f"Config file {path} must contain a key-value mapping"
        raise ConfigurationError(msg)
    logger.debug(f"Loaded config file {path}")
    return raw


def build_run_config(
    command: str, inputs: list[str], file_values: dict[str, Any], flag_values: dict[str, Any]
) -> RunConfig:
    """Merge defaults, config-file values and flag values into a RunConfig.

    Flag values of None count as unset.

    Raises:
        ConfigurationError: On unknown keys or uncoercible values.
    """
    known = {f.name for f in fields(RunConfig)} - RESERVED_KEYS
    flag_values = {key: value for key, value in flag_values.items() if value is not None}
    merged: dict[str, Any] = {}
    for source, values in (("config file", file_values), ("flags", flag_values)):
        unknown = set(values) - known
        if unknown:
            msg = f"Unknown {source} key(s): {sorted(unknown)}"
            raise ConfigurationError(msg)
        merged.update({key: coerce(key, value) for key, value in values.items()})

    config = RunConfig(command=command, inputs=list(inputs), **merged)
    if len(config.band) != 2:  # noqa: PLR2004
        msg = f"band needs exactly two altitudes, got {config.band}"
        raise ConfigurationError(msg)
    return config
