"""Hufnagel-Valley profiles, scale-factor calibration and generalized HV fitting.

Analytic models take altitude above sea level. Profiles computed from
soundings are above ground, so calibration and fitting accept the station
elevation that separates the two conventions.
"""

import logging
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Any

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.optimize import minimize

from common.errors import FitError, InsufficientDataError, ValidationError
from common.helpers import get_thread_count
from estimator.estimator import Cn2Profile

logger = logging.getLogger(__name__)

Model = Callable[[npt.NDArray[np.float64]], npt.NDArray[np.float64]]

# Log10 search half-widths around the initial values.
MAGNITUDE_DECADES = 3.0
SCALE_DECADES = 1.0
# Log10 spread of the random multi-start perturbations.
MAGNITUDE_SPREAD = 0.5
SCALE_SPREAD = 0.2
DEFAULT_STARTS = 8
TINY_CN2 = 1e-300


@dataclass(frozen=True)
class HVParams:
    """Hufnagel-Valley parameters: rms high-altitude wind w [m/s], ground C_n² A."""

    w: float = 21.0
    A: float = 1.7e-14

    def __post_init__(self) -> None:
        if self.w <= 0 or self.A <= 0:
            msg = f"HV parameters must be positive, got w={self.w}, A={self.A}"
            raise ValidationError(msg)


HV57 = HVParams()


def hv_cn2(z: float | npt.ArrayLike, params: HVParams = HV57) -> float | npt.NDArray[np.float64]:
    """Hufnagel-Valley C_n² [m^-2/3] at altitude z [m above sea level]."""
    h = np.asarray(z, dtype=float)
    value = (
        0.00594 * (params.w / 27.0) ** 2 * (h / 1e5) ** 10 * np.exp(-h / 1000.0)
        + 2.7e-16 * np.exp(-h / 1500.0)
        + params.A * np.exp(-h / 100.0)
    )
    return float(value) if value.ndim == 0 else value


@dataclass(frozen=True)
class GaussianLayer:
    """Isolated turbulent layer: magnitude E, centre altitude H_E, thickness e."""

    E: float
    H_E: float
    e: float


BASE_NAMES = ("A", "B", "C", "D", "H_A", "H_B", "H_C", "H_D", "d")
MAGNITUDES = frozenset({"A", "B", "C", "D"})


def _is_magnitude(name: str) -> bool:
    return name in MAGNITUDES or name.startswith("E_")


@dataclass(frozen=True)
class GeneralizedHVParams:
    """Coefficients of the generalized Hufnagel-Valley profile.

    Layer parameters are addressed as ``E_1``, ``H_E_1``, ``e_1`` for the first
    extra layer, ``E_2`` ... for the next. ``fixed`` names the parameters held
    constant during fitting.
    """

    A: float
    B: float
    C: float
    D: float
    H_A: float
    H_B: float
    H_C: float
    H_D: float
    d: float
    layers: tuple[GaussianLayer, ...] = ()
    fixed: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        values = self.as_dict()
        for name, value in values.items():
            if _is_magnitude(name) and value < 0:
                msg = f"Magnitude {name} must be non-negative, got {value}"
                raise ValidationError(msg)
            if not _is_magnitude(name) and value <= 0:
                msg = f"Scale {name} must be positive, got {value}"
                raise ValidationError(msg)
        unknown = set(self.fixed) - set(values)
        if unknown:
            msg = f"Unknown fixed parameter(s): {sorted(unknown)}"
            raise ValidationError(msg)

    def names(self) -> list[str]:
        names = list(BASE_NAMES)
        for i in range(1, len(self.layers) + 1):
            names += [f"E_{i}", f"H_E_{i}", f"e_{i}"]
        return names

    def as_dict(self) -> dict[str, float]:
        values = {name: float(getattr(self, name)) for name in BASE_NAMES}
        for i, layer in enumerate(self.layers, start=1):
            values.update({f"E_{i}": layer.E, f"H_E_{i}": layer.H_E, f"e_{i}": layer.e})
        return values

    def free_names(self) -> list[str]:
        return [name for name in self.names() if name not in self.fixed]

    def with_values(self, values: Mapping[str, float]) -> "GeneralizedHVParams":
        base = {k: float(v) for k, v in values.items() if k in BASE_NAMES}
        layers = list(self.layers)
        for i, layer in enumerate(self.layers, start=1):
            layers[i - 1] = GaussianLayer(
                E=float(values.get(f"E_{i}", layer.E)),
                H_E=float(values.get(f"H_E_{i}", layer.H_E)),
                e=float(values.get(f"e_{i}", layer.e)),
            )
        return replace(self, **base, layers=tuple(layers))

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {name: float(getattr(self, name)) for name in BASE_NAMES}
        data["layers"] = [asdict(layer) for layer in self.layers]
        data["fixed"] = sorted(self.fixed)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GeneralizedHVParams":
        try:
            base = {name: float(data[name]) for name in BASE_NAMES}
            layers = tuple(GaussianLayer(**layer) for layer in data.get("layers", []))
        except (KeyError, TypeError, ValueError) as exc:
            msg = f"Invalid generalized HV parameters: {exc}"
            raise ValidationError(msg) from exc
        return cls(**base, layers=layers, fixed=frozenset(data.get("fixed", [])))


TRAPPES = GeneralizedHVParams(
    A=1.32e-13,
    B=2.7e-16,
    C=2.07e-4,
    D=1.37e-17,
    H_A=100.0,
    H_B=1645.0,
    H_C=1200.0,
    H_D=12000.0,
    d=1200.0,
    fixed=frozenset({"B", "H_A", "H_D", "d"}),
)

HILO = GeneralizedHVParams(
    A=4.66e-14,
    B=2.7e-16,
    C=2.96e-5,
    D=4.67e-18,
    H_A=100.0,
    H_B=2006.0,
    H_C=1340.0,
    H_D=17000.0,
    d=1700.0,
    layers=(GaussianLayer(E=1.59e-16, H_E=2200.0, e=300.0),),
    fixed=frozenset({"B", "H_A", "H_D", "d", "H_E_1", "e_1"}),
)


def generalized_hv_cn2(z: float | npt.ArrayLike, params: GeneralizedHVParams) -> float | npt.NDArray[np.float64]:
    """Generalized Hufnagel-Valley C_n² [m^-2/3] at altitude z [m]."""
    h = np.asarray(z, dtype=float)
    value = (
        params.A * np.exp(-h / params.H_A)
        + params.B * np.exp(-h / params.H_B)
        + params.C * (h / 1e5) ** 10 * np.exp(-h / params.H_C)
        + params.D * np.exp(-((h - params.H_D) ** 2) / (2 * params.d**2))
    )
    for layer in params.layers:
        value = value + layer.E * np.exp(-((h - layer.H_E) ** 2) / (2 * layer.e**2))
    return float(value) if np.ndim(value) == 0 else value


PRESETS: dict[str, Model] = {
    "hv57": partial(hv_cn2, params=HV57),  # type: ignore[dict-item]
    "trappes": partial(generalized_hv_cn2, params=TRAPPES),  # type: ignore[dict-item]
    "hilo": partial(generalized_hv_cn2, params=HILO),  # type: ignore[dict-item]
}


def model_curve(model: Model, altitudes: npt.ArrayLike) -> pd.DataFrame:
    """Tabulate a model as ``altitude_m,cn2_m_23``."""
    z = np.asarray(altitudes, dtype=float)
    return pd.DataFrame({"altitude_m": z, "cn2_m_23": np.asarray(model(z), dtype=float)})


def _resolve_elevation(station_elevation: float | None) -> float:
    if station_elevation is None:
        logger.warning("No station elevation given; treating profile altitudes as above sea level")
        return 0.0
    return station_elevation


@dataclass(frozen=True)
class CalibrationBand:
    """Altitude band [m] over which a profile is matched to the reference."""

    z_low: float = 1000.0
    z_high: float = 4000.0

    def __post_init__(self) -> None:
        if not self.z_high > self.z_low >= 0:
            msg = f"Calibration band must satisfy z_high > z_low >= 0, got [{self.z_low}, {self.z_high}]"
            raise ValidationError(msg)


@dataclass(frozen=True)
class CalibrationResult:
    c: float
    residual_rms: float
    levels_used: int
    excluded: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def calibrate_scale_factor(
    profile: Cn2Profile,
    reference: Model,
    band: CalibrationBand | None = None,
    station_elevation: float | None = None,
) -> CalibrationResult:
    """Multiplier bringing the profile onto the reference inside the band.

    ``c = 10^mean(log10 reference - log10 profile)``, the least-squares
    translation in log space. Non-positive profile values in the band are
    excluded and counted.

    Raises:
        InsufficientDataError: If fewer than 3 usable levels lie in the band.
    """
    band = band or CalibrationBand()
    offset = _resolve_elevation(station_elevation)
    z = profile.altitudes
    in_band = (z >= band.z_low) & (z <= band.z_high)
    if not in_band.any():
        msg = f"No profile level inside the calibration band [{band.z_low}, {band.z_high}] m"
        raise InsufficientDataError(msg)

    values = profile.cn2[in_band]
    positive = values > 0
    excluded = int((~positive).sum())
    if excluded:
        logger.warning(f"Excluded {excluded} non-positive level(s) from calibration")
    if positive.sum() < 3:  # noqa: PLR2004
        msg = f"Only {int(positive.sum())} positive level(s) in the calibration band, at least 3 required"
        raise InsufficientDataError(msg)

    ref = np.asarray(reference(z[in_band][positive] + offset), dtype=float)
    if np.any(ref <= 0):
        msg = "Reference model must be positive over the calibration band"
        raise ValidationError(msg)

    diff = np.log10(ref) - np.log10(values[positive])
    shift = float(np.mean(diff))
    residual = float(np.sqrt(np.mean((diff - shift) ** 2)))
    return CalibrationResult(
        c=float(10.0**shift), residual_rms=residual, levels_used=int(positive.sum()), excluded=excluded
    )


@dataclass(frozen=True)
class StartResult:
    index: int
    start: dict[str, float]
    params: dict[str, float]
    residual: float
    iterations: int
    success: bool
    message: str


@dataclass(frozen=True)
class FitResult:
    """Outcome of :func:`fit_generalized_hv`; ``residual`` is a sum of squared log10 residuals."""

    params: GeneralizedHVParams
    residual: float
    initial_residual: float
    iterations: int
    best_start: int
    starts: list[StartResult]
    levels: int = 0

    @property
    def rms(self) -> float:
        """Root-mean-square log10 residual per fitted level."""
        return float(np.sqrt(self.residual / self.levels)) if self.levels else float("nan")

    def to_dict(self) -> dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "free": self.params.free_names(),
            "residual": self.residual,
            "rms": self.rms,
            "levels": self.levels,
            "initial_residual": self.initial_residual,
            "iterations": self.iterations,
            "best_start": self.best_start,
            "starts": [asdict(s) for s in self.starts],
        }


def _bounds(init: GeneralizedHVParams, free: list[str]) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    centre = np.log10([max(init.as_dict()[name], TINY_CN2) for name in free])
    width = np.array([MAGNITUDE_DECADES if _is_magnitude(name) else SCALE_DECADES for name in free])
    return centre - width, centre + width


def fit_generalized_hv(
    profile: Cn2Profile,
    init: GeneralizedHVParams,
    n_starts: int = DEFAULT_STARTS,
    seed: int = 0,
    station_elevation: float | None = 0.0,
    threads: int | None = None,
) -> FitResult:
    """Least-squares fit of the free generalized HV parameters in log10 C_n².

    Every free parameter is optimised through its log10, within a few decades
    of its initial value, with a bounded Powell search. Start 0 is the initial
    guess; the others are seeded perturbations of it. The best start wins,
    ties going to the lower index, and the result never has a larger residual
    than the initial guess.

    Raises:
        InsufficientDataError: If too few positive levels are available.
        FitError: If no start converges; the best attempt is attached.
    """
    if n_starts < 1:
        msg = f"At least one start is required, got {n_starts}"
        raise ValidationError(msg)
    free = init.free_names()
    if not free:
        msg = "All parameters are fixed; nothing to fit"
        raise ValidationError(msg)

    offset = _resolve_elevation(station_elevation)
    mask = profile.cn2 > 0
    if mask.sum() <= len(free):
        msg = f"{int(mask.sum())} positive level(s) cannot constrain {len(free)} free parameter(s)"
        raise InsufficientDataError(msg)
    z = profile.altitudes[mask] + offset
    log_y = np.log10(profile.cn2[mask])

    def unpack(x: npt.NDArray[np.float64]) -> GeneralizedHVParams:
        return init.with_values(dict(zip(free, 10.0**x, strict=True)))

    def objective(x: npt.NDArray[np.float64]) -> float:
        model = np.maximum(np.asarray(generalized_hv_cn2(z, unpack(x))), TINY_CN2)
        r = np.log10(model) - log_y
        return float(r @ r)

    lower, upper = _bounds(init, free)
    x0 = np.log10([init.as_dict()[name] for name in free])
    rng = np.random.default_rng(seed)
    spread = np.array([MAGNITUDE_SPREAD if _is_magnitude(name) else SCALE_SPREAD for name in free])
    starts = [x0] + [np.clip(x0 + rng.uniform(-spread, spread), lower, upper) for _ in range(n_starts - 1)]

    def run(index: int) -> tuple[StartResult, npt.NDArray[np.float64]]:
        res = minimize(
            objective,
            starts[index],
            method="Powell",
            bounds=list(zip(lower, upper, strict=True)),
            options={"xtol": 1e-10, "ftol": 1e-14, "maxiter": 20_000, "maxfev": 200_000},
        )
        fitted = unpack(res.x).as_dict()
        result = StartResult(
            index=index,
            start={name: float(10.0**v) for name, v in zip(free, starts[index], strict=True)},
            params={name: fitted[name] for name in free},
            residual=float(res.fun),
            iterations=int(res.nit),
            success=bool(res.success),
            message=str(res.message),
        )
        return result, res.x

    workers = min(n_starts, threads or get_thread_count())
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(run, range(n_starts)))

    start_results = [result for result, _ in outcomes]
    initial_residual = objective(x0)
    best_index = min(range(n_starts), key=lambda i: (start_results[i].residual, i))
    best, best_x = outcomes[best_index]
    logger.info(f"Best fit from start {best_index}: residual {best.residual:.4g} (initial {initial_residual:.4g})")

    params = unpack(best_x)
    residual = best.residual
    if residual > initial_residual:
        params, residual = init, initial_residual

    result = FitResult(
        params=params,
        residual=residual,
        initial_residual=initial_residual,
        iterations=sum(r.iterations for r in start_results),
        best_start=best_index,
        starts=start_results,
        levels=int(mask.sum()),
    )
    if not any(r.success for r in start_results):
        msg = f"Generalized HV fit did not converge from any of {n_starts} start(s)"
        raise FitError(msg, best=result)
    return result
