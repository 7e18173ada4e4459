"""Synthetic von Kármán refractive-index fluctuations and their oracles.

Spectra use κ in rad/m. The 1-D spectrum ``V_n`` is two-sided: the variance of
the 1-D field is ``∫ V_n(κ) dκ`` over the whole real line.

Synthesis colours unit Gaussian white noise ``w`` in the DFT domain:

    n1 = IDFT( DFT(w) · sqrt(N · V_n(κ_k) · dκ) ),   dκ = 2π / (N·dz)

so that ``E|DFT(n1)_k|² = N² V_n(κ_k) dκ``. The expected sample variance is
then the Riemann sum of ``V_n`` over the resolved band ``|κ| ≤ π/dz``. The κ=0
bin takes ``V_n(0)``, which is finite for von Kármán. The output is periodic
over ``N·dz``; statistics should skip the ``guard_fraction`` of samples at
both ends.
"""

import logging
import math
import warnings
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.integrate import IntegrationWarning, quad

from common.errors import NumericalError, SizeError, ValidationError
from common.helpers import get_thread_count
from estimator.estimator import EstimatorConfig, estimate_cn2
from prep.prep import FluctuationProfile, UniformProfile, extract_fluctuations

logger = logging.getLogger(__name__)

SPECTRUM_COEFF = 0.033
# (6π/5)·0.033, closed form of 2π ∫_κ^∞ κ' Φn(κ') dκ' for the von Kármán spectrum.
V_COEFF = 6.0 * math.pi / 5.0 * SPECTRUM_COEFF
DEFAULT_N0 = 1.000278
DEFAULT_GUARD_FRACTION = 0.1
QUAD_RTOL = 1e-4
# Head/tail split of the structure-function integral, in units of 1/ρ.
QUAD_SPLIT = 50.0
QUAD_LIMIT = 500

Spectrum = Callable[[float], float]


@dataclass(frozen=True)
class SpectrumParams:
    """von Kármán spectrum parameters.

    Attributes:
        cn2: Structure parameter [m^-2/3].
        L0: Outer scale [m].
        l0: Inner scale [m], informational only.
    """

    cn2: float
    L0: float
    l0: float = 1e-3

    def __post_init__(self) -> None:
        if self.cn2 <= 0:
            msg = f"cn2 must be positive, got {self.cn2}"
            raise ValidationError(msg)
        if not 0 < self.l0 < self.L0:
            msg = f"Scales must satisfy 0 < l0 < L0, got l0={self.l0}, L0={self.L0}"
            raise ValidationError(msg)

    @property
    def kappa0(self) -> float:
        return 1.0 / self.L0


def phi_n(kappa: float | npt.ArrayLike, params: SpectrumParams) -> float | npt.NDArray[np.float64]:
    """3-D von Kármán spectrum ``0.033 Cn² (κ² + κ0²)^(-11/6)``."""
    k = np.asarray(kappa, dtype=float)
    value = SPECTRUM_COEFF * params.cn2 * (k**2 + params.kappa0**2) ** (-11.0 / 6.0)
    return float(value) if value.ndim == 0 else value


def v_n(kappa: float | npt.ArrayLike, params: SpectrumParams) -> float | npt.NDArray[np.float64]:
    """1-D spectrum ``(6π/5)·0.033 Cn² (κ² + κ0²)^(-5/6)``."""
    k = np.asarray(kappa, dtype=float)
    value = V_COEFF * params.cn2 * (k**2 + params.kappa0**2) ** (-5.0 / 6.0)
    return float(value) if value.ndim == 0 else value


def kolmogorov_spectrum(cn2: float) -> Spectrum:
    """Pure Kolmogorov spectrum ``0.033 Cn² κ^(-11/3)``."""

    def spectrum(kappa: float) -> float:
        return SPECTRUM_COEFF * cn2 * kappa ** (-11.0 / 3.0)

    return spectrum


def _one_minus_sinc(x: float) -> float:
    if abs(x) < 1e-3:  # noqa: PLR2004
        x2 = x * x
        return x2 / 6.0 - x2 * x2 / 120.0
    return 1.0 - math.sin(x) / x


def theoretical_structure_function(rho: float, spectrum: Spectrum, rtol: float = QUAD_RTOL) -> float:
    """Structure function ``8π ∫ κ² Φn(κ) (1 - sin κρ / κρ) dκ`` by adaptive quadrature.

    The range is split at ``κ = 50/ρ``. The head is integrated directly. The
    tail is split into the plain part ``∫ κ² Φn`` and the oscillating part
    ``∫ (κ Φn / ρ) sin κρ``, the latter with a Fourier-weighted rule on the
    semi-infinite interval.

    Raises:
        NumericalError: If any part fails to converge to ``rtol``.
    """
    if rho <= 0:
        msg = f"Separation must be positive, got {rho}"
        raise ValidationError(msg)
    cutoff = QUAD_SPLIT / rho

    def head(kappa: float) -> float:
        if kappa == 0.0:
            return 0.0
        return kappa * kappa * spectrum(kappa) * _one_minus_sinc(kappa * rho)

    parts: dict[str, tuple[float, float]] = {}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", IntegrationWarning)
            parts["head"] = quad(head, 0.0, cutoff, epsabs=0.0, epsrel=rtol, limit=QUAD_LIMIT)
            parts["plain"] = quad(
                lambda k: k * k * spectrum(k), cutoff, np.inf, epsabs=0.0, epsrel=rtol, limit=QUAD_LIMIT
            )
            scale = abs(parts["head"][0]) + abs(parts["plain"][0])
            parts["oscillating"] = quad(
                lambda k: k * spectrum(k) / rho,
                cutoff,
                np.inf,
                weight="sin",
                wvar=rho,
                epsabs=0.1 * rtol * scale,
                limlst=100,
            )
    except IntegrationWarning as exc:
        msg = f"Structure-function quadrature did not converge at rho={rho} m after parts {sorted(parts)}: {exc}"
        raise NumericalError(msg) from exc

    total = parts["head"][0] + parts["plain"][0] - parts["oscillating"][0]
    error = sum(err for _, err in parts.values())
    if not np.isfinite(total) or error > 10 * rtol * abs(total):
        detail = ", ".join(f"{name}={value:.6g}±{err:.2g}" for name, (value, err) in parts.items())
        msg = f"Structure-function quadrature inaccurate at rho={rho} m: {detail}"
        raise NumericalError(msg)
    return 8.0 * math.pi * total


def von_karman_structure_function(rho: float, params: SpectrumParams) -> float:
    return theoretical_structure_function(rho, lambda k: float(phi_n(k, params)))


def kolmogorov_structure_function(rho: float | npt.ArrayLike, cn2: float) -> float | npt.NDArray[np.float64]:
    value = cn2 * np.asarray(rho, dtype=float) ** (2.0 / 3.0)
    return float(value) if value.ndim == 0 else value


def band_variance(params: SpectrumParams, dz: float) -> float:
    """Integral of ``V_n`` over the band resolved at spacing ``dz``."""
    value, _ = quad(lambda k: float(v_n(k, params)), 0.0, math.pi / dz, epsabs=0.0, epsrel=1e-8, limit=QUAD_LIMIT)
    return 2.0 * value


@dataclass(frozen=True, eq=False)
class SyntheticField:
    """One synthetic realisation ``n = n0 + n1`` sampled every ``dz`` metres."""

    dz: float
    n1: npt.NDArray[np.float64]
    n0: float
    params: SpectrumParams
    seed: int
    guard_fraction: float = DEFAULT_GUARD_FRACTION

    @property
    def guard(self) -> int:
        return int(self.guard_fraction * self.n1.size)

    @property
    def interior(self) -> npt.NDArray[np.float64]:
        return self.n1[self.guard : self.n1.size - self.guard]

    @property
    def altitudes(self) -> npt.NDArray[np.float64]:
        return np.arange(self.n1.size) * self.dz

    def as_fluctuations(self) -> FluctuationProfile:
        """The generated n1 itself, valid outside the guard samples."""
        n1 = np.full(self.n1.shape, np.nan)
        n1[self.guard : self.n1.size - self.guard] = self.interior
        grid = UniformProfile(z0=0.0, dz=self.dz, n=self.n0 + self.n1)
        return FluctuationProfile(grid=grid, n1=n1, valid_range=(self.guard, self.n1.size - self.guard))

    def to_uniform(self) -> UniformProfile:
        """Refractive index ``n0 + n1`` over the interior samples."""
        return UniformProfile(z0=self.guard * self.dz, dz=self.dz, n=self.n0 + self.interior)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"z_m": self.altitudes, "n1": self.n1})

    def write(self, stream: TextIO) -> None:
        """Write the inspection CSV ``z_m,n1``."""
        self.to_frame().to_csv(stream, index=False, lineterminator="\n")


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


def synthesize_fluctuations(
    n_samples: int,
    dz: float,
    params: SpectrumParams,
    seed: int,
    n0: float = DEFAULT_N0,
    guard_fraction: float = DEFAULT_GUARD_FRACTION,
) -> SyntheticField:
    """Generate 1-D von Kármán fluctuations by white-noise colouring.

    Raises:
        SizeError: If ``n_samples`` is not a power of two.
    """
    if not _is_power_of_two(n_samples) or n_samples < 2:  # noqa: PLR2004
        msg = f"Sample count must be a power of two, got {n_samples}"
        raise SizeError(msg)
    if dz <= 0:
        msg = f"Sample spacing must be positive, got {dz}"
        raise ValidationError(msg)
    if not 0 <= guard_fraction < 0.5:  # noqa: PLR2004
        msg = f"Guard fraction must be in [0, 0.5), got {guard_fraction}"
        raise ValidationError(msg)

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n_samples)
    kappa = 2.0 * math.pi * np.fft.rfftfreq(n_samples, d=dz)
    dkappa = 2.0 * math.pi / (n_samples * dz)
    transfer = np.sqrt(n_samples * np.asarray(v_n(kappa, params)) * dkappa)
    n1 = np.fft.irfft(np.fft.rfft(noise) * transfer, n=n_samples)
    return SyntheticField(dz=dz, n1=n1, n0=n0, params=params, seed=seed, guard_fraction=guard_fraction)


@dataclass(frozen=True)
class StudyRow:
    dz: float
    L0: float
    omega: int
    m: int
    trials: int
    ratio_mean: float
    ratio_std: float


@dataclass
class StudyTable:
    """Estimated-to-true C_n² ratios from :func:`scale_factor_study`."""

    rows: list[StudyRow] = field(default_factory=list)

    COLUMNS = ("dz_m", "L0_m", "omega", "m", "trials", "ratio_mean", "ratio_std")

    def ratio(self, dz: float, L0: float, omega: int, m: int) -> float:
        row = next(
            (r for r in self.rows if r.dz == dz and r.L0 == L0 and r.omega == omega and r.m == m),
            None,
        )
        if row is None:
            msg = f"No study row for dz={dz}, L0={L0}, omega={omega}, m={m}"
            raise KeyError(msg)
        return row.ratio_mean

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.dz, r.L0, r.omega, r.m, r.trials, r.ratio_mean, r.ratio_std) for r in self.rows],
            columns=list(self.COLUMNS),
        )

    def write(self, stream: TextIO) -> None:
        self.to_frame().to_csv(stream, index=False, lineterminator="\n")


def decimation_step(dz: float, L0: float, oversample: int) -> int:
    """Fine samples per output sample.

    The fine spacing never exceeds ``L0 / oversample``, so grids coarser than
    the outer scale all resolve the same share of the field variance.
    """
    return oversample * max(1, math.ceil(dz / L0 - 1e-9))


def _trial_seed(seed: int, *indices: int) -> int:
    # Independent of omega and m, so every window setting sees the same fields.
    return int(np.random.SeedSequence([seed, *indices]).generate_state(1)[0])


@dataclass(frozen=True)
class _Trial:
    dz: float
    L0: float
    seed: int


def _run_trial(
    trial: _Trial,
    cn2: float,
    omega_list: Sequence[int],
    m_list: Sequence[int],
    n_samples: int,
    oversample: int,
) -> dict[tuple[int, int], float]:
    params = SpectrumParams(cn2=cn2, L0=trial.L0)
    step = decimation_step(trial.dz, trial.L0, oversample)
    fine_count = 1 << math.ceil(math.log2(n_samples * step))
    fine = synthesize_fluctuations(fine_count, trial.dz / step, params, trial.seed)
    coarse = fine.n1[::step][:n_samples]
    guard = int(fine.guard_fraction * coarse.size)
    uniform = UniformProfile(z0=0.0, dz=trial.dz, n=fine.n0 + coarse[guard : coarse.size - guard])

    ratios = {}
    for omega in omega_list:
        fluctuations = extract_fluctuations(uniform, omega)
        for m in m_list:
            estimate = estimate_cn2(fluctuations, EstimatorConfig(dz=trial.dz, omega=omega, m=m, c=1.0))
            ratios[(omega, m)] = float(np.mean(estimate.cn2)) / cn2
    return ratios


def scale_factor_study(
    dz_list: Sequence[float],
    L0_list: Sequence[float],
    omega_list: Sequence[int],
    m_list: Sequence[int],
    trials: int,
    seed: int,
    cn2: float = 1e-16,
    n_samples: int = 2**14,
    oversample: int = 8,
    threads: int | None = None,
) -> StudyTable:
    """Ratio of estimated to true C_n² over a grid of settings, with c = 1.

    Each trial synthesises a field at least ``oversample`` times finer than
    both ``dz`` and ``L0`` and keeps every k-th sample (see
    :func:`decimation_step`), so the estimator sees point samples of a
    continuous field. Trials run in parallel; results do not depend on
    the thread count.
    """
    if not (dz_list and L0_list and omega_list and m_list):
        msg = "Every parameter list of the study must be non-empty"
        raise ValidationError(msg)
    if trials < 1:
        msg = f"At least one trial is required, got {trials}"
        raise ValidationError(msg)
    if oversample < 1:
        msg = f"Oversampling factor must be a positive integer, got {oversample}"
        raise ValidationError(msg)

    tasks = [
        _Trial(dz=dz, L0=L0, seed=_trial_seed(seed, i, j, t))
        for i, dz in enumerate(dz_list)
        for j, L0 in enumerate(L0_list)
        for t in range(trials)
    ]
    workers = threads or get_thread_count()
    logger.info(f"Running {len(tasks)} synthetic trial(s) on {workers} thread(s)")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(
            pool.map(lambda task: _run_trial(task, cn2, omega_list, m_list, n_samples, oversample), tasks)
        )

    table = StudyTable()
    for i, dz in enumerate(dz_list):
        for j, L0 in enumerate(L0_list):
            start = (i * len(L0_list) + j) * trials
            chunk = results[start : start + trials]
            for omega in omega_list:
                for m in m_list:
                    ratios = np.array([r[(omega, m)] for r in chunk])
                    std = float(ratios.std(ddof=1)) if trials > 1 else 0.0
                    table.rows.append(StudyRow(dz, L0, omega, m, trials, float(ratios.mean()), std))
    return table
