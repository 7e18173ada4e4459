"""Command-line entry point: batch C_n² estimation, synthesis, calibration and fitting."""

import argparse
import json
import logging
import sys
from collections import Counter
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from io import StringIO
from pathlib import Path
from typing import Any, NoReturn

import numpy as np
import pandas as pd

from cli.config import RunConfig, build_run_config, load_config_file
from common.errors import (
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VALIDATION,
    Cn2ProfilerError,
    ConfigurationError,
    EmptyResultError,
    FitError,
    FormatError,
    InsufficientDataError,
    ValidationError,
)
from common.helpers import atomic_write_text, get_thread_count, setup_logging
from estimator.estimator import (
    Cn2Profile,
    EstimatorConfig,
    average_profiles,
    bin_average,
    compute_cn2,
    lookup_scale_factor,
    read_cn2_profile,
    reject_outlier_profiles,
    write_cn2_profile,
)
from models.models import (
    HILO,
    PRESETS,
    TRAPPES,
    CalibrationBand,
    GeneralizedHVParams,
    calibrate_scale_factor,
    fit_generalized_hv,
    generalized_hv_cn2,
    model_curve,
)
from prep.prep import find_temperature_inversions, resample_profile
from sounding.sounding import (
    SoundingFormat,
    SoundingProfile,
    parse_sounding,
    parse_thermosonde,
    read_metadata,
    read_text,
    thermosonde_cn2,
)
from synth.synth import SpectrumParams, scale_factor_study, synthesize_fluctuations

logger = logging.getLogger(__name__)

ESTIMATING_COMMANDS = ("compute", "thermo")
FIT_PRESETS: dict[str, GeneralizedHVParams] = {"trappes": TRAPPES, "hilo": HILO}

RUN_CONFIG_FILE = "run_config.json"
LOG_FILE = "cn2profiler.log"
SUMMARY_FILE = "summary.json"

PROCESSED = "processed"
SKIPPED_CEILING = "skipped_ceiling"
FAILED_PARSE = "failed_parse"
FAILED = "failed"


class Cn2ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    parent.add_argument("--config", default=None, help="YAML key-value file (default: data/cn2profiler.yaml)")
    parent.add_argument("--out", help="Output directory")
    parent.add_argument("--seed", type=int, help="Random seed")
    parent.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    return parent


def _estimator_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    parent.add_argument("--dz", type=float, help="Grid spacing [m]")
    parent.add_argument("--omega", type=int, help="Window half-width in samples")
    parent.add_argument("--m", type=int, help="Separation in samples (delta = m*dz)")
    parent.add_argument("--scale-factor", type=float, help="Estimator scale factor c (default: calibration table)")
    parent.add_argument("--wavelength", type=float, help="Optical wavelength [µm] for the dispersive index")
    parent.add_argument("--ceiling", type=float, help="Altitude [m] a complete ascent must reach")
    parent.add_argument("--format", choices=("csv", "uwyo"), help="Sounding file layout")
    parent.add_argument("--include-below-ceiling", action="store_true", help="Keep ascents below the ceiling")
    return parent


def _reference_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    parent.add_argument("--reference", choices=sorted(PRESETS), help="Reference model")
    parent.add_argument("--station-elevation", type=float, help="Station elevation [m] above sea level")
    return parent


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser for every command."""
    parser = Cn2ArgumentParser(prog="cn2profiler", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    # Unset flags stay out of the namespace so config-file values survive the merge.
    add_parser = partial(sub.add_parser, argument_default=argparse.SUPPRESS)
    common = _common_options()
    estimator = _estimator_options()
    reference = _reference_options()

    compute = add_parser("compute", parents=[common, estimator], help="Estimate C_n² from soundings")
    compute.add_argument("inputs", nargs="+", help="Sounding files")
    compute.add_argument("--inversions", action="store_true", help="Also write temperature inversions as JSON")

    average = add_parser("average", parents=[common], help="Average C_n² profile files")
    average.add_argument("inputs", nargs="+", help="Profile CSV files")
    average.add_argument("--min-fraction", type=float, help="Fraction of profiles a level needs to be kept")
    average.add_argument(
        "--reject-outliers",
        type=float,
        nargs="?",
        const=2.0,
        help="Drop profiles whose mean log10 C_n² departs from the median by more than this many decades",
    )

    synth = add_parser("synth", parents=[common], help="Synthesise von Kármán fluctuations")
    synth.add_argument("--dz", type=float, help="Sample spacing [m]")
    synth.add_argument("--samples", type=int, help="Number of samples (power of two)")
    synth.add_argument("--cn2", type=float, help="C_n² [m^-2/3]")
    synth.add_argument("--L0", type=float, help="Outer scale [m]")
    synth.add_argument("--l0", type=float, help="Inner scale [m]")
    synth.add_argument("--n0", type=float, help="Mean refractive index")

    study = add_parser("study", parents=[common], help="Scale-factor study on synthetic fields")
    study.add_argument("--dz-list", help="Comma-separated grid spacings [m]")
    study.add_argument("--L0-list", help="Comma-separated outer scales [m]")
    study.add_argument("--omega-list", help="Comma-separated window half-widths")
    study.add_argument("--m-list", help="Comma-separated separations in samples")
    study.add_argument("--trials", type=int, help="Trials per setting")
    study.add_argument("--study-samples", type=int, help="Samples per trial (power of two)")
    study.add_argument("--cn2", type=float, help="C_n² [m^-2/3]")

    calibrate = add_parser("calibrate", parents=[common, reference], help="Match profiles to a reference model")
    calibrate.add_argument("inputs", nargs="+", help="Profile CSV files")
    calibrate.add_argument("--band", help="Calibration band 'z_low,z_high' [m]")

    fit = add_parser("fit", parents=[common], help="Fit the generalized HV model to a profile")
    fit.add_argument("inputs", nargs=1, help="Profile CSV file")
    fit.add_argument("--init", help="Initial parameters: 'trappes', 'hilo' or a JSON file")
    fit.add_argument("--free", help="Comma-separated parameters to fit; the others stay fixed")
    fit.add_argument("--starts", type=int, help="Number of optimiser starts")
    fit.add_argument("--station-elevation", type=float, help="Station elevation [m] above sea level")

    thermo = add_parser("thermo", parents=[common, estimator], help="Compare with thermosonde C_n²")
    thermo.add_argument("inputs", nargs="+", help="Pairs of thermosonde and sounding files")

    compare = add_parser("compare", parents=[common, reference], help="Compare profiles with a model")
    compare.add_argument("inputs", nargs="+", help="Profile CSV files")
    return parser


@dataclass(frozen=True)
class FileOutcome:
    input: str
    status: str
    output: str | None = None
    error: str | None = None
    dropped_rows: int = 0


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def _write_json(data: Any, path: Path) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2, default=str))


def _require_files(inputs: Sequence[str]) -> list[Path]:
    paths = [Path(name) for name in inputs]
    for path in paths:
        if not path.is_file():
            msg = f"Input file not found: {path}"
            raise FileNotFoundError(msg)
    return paths


def estimator_config(config: RunConfig) -> EstimatorConfig:
    """The estimator settings of a run; ``scale_factor`` must already be resolved."""
    return EstimatorConfig(
        dz=config.grid_spacing(),
        omega=config.omega,
        m=config.m,
        c=config.scale_factor if config.scale_factor is not None else 1.0,
        wavelength=config.wavelength,
    )


def resolve_scale_factor(config: RunConfig) -> None:
    """Fill in the tabulated scale factor when none was given."""
    if config.command not in ESTIMATING_COMMANDS or config.scale_factor is not None:
        return
    table = lookup_scale_factor(config.grid_spacing(), config.omega, config.m)
    if table is None:
        logger.warning(
            f"No tabulated scale factor for dz={config.grid_spacing()}, omega={config.omega}, m={config.m}; using c=1"
        )
        config.scale_factor = 1.0
    else:
        logger.info(f"Using tabulated scale factor c={table}")
        config.scale_factor = table


def load_sounding(path: Path, config: RunConfig) -> SoundingProfile:
    """Parse a sounding file, using its ``.json`` metadata sidecar when present."""
    sidecar = path.with_suffix(".json")
    metadata = read_metadata(sidecar) if sidecar.is_file() else None
    fmt = SoundingFormat(kind=config.format, ceiling_m=config.ceiling, metadata=metadata)  # type: ignore[arg-type]
    return parse_sounding(StringIO(read_text(path)), fmt)


def _process_sounding(path: Path, config: RunConfig, est: EstimatorConfig) -> FileOutcome:
    try:
        sounding = load_sounding(path, config)
    except ValidationError as exc:
        logger.error(f"{path}: {exc}")
        return FileOutcome(str(path), FAILED_PARSE, error=str(exc))

    if not sounding.reaches_ceiling and not config.include_below_ceiling:
        logger.info(f"{path}: skipped, ascent below the {config.ceiling:.0f} m ceiling")
        return FileOutcome(str(path), SKIPPED_CEILING)

    try:
        above_ground = sounding.above_ground()
        profile = compute_cn2(above_ground, est)
        profile = Cn2Profile(profile.altitudes, profile.cn2, profile.config, provenance=path.name)
        output = write_cn2_profile(profile, config.out_dir / f"{path.stem}_cn2.csv")
        if config.inversions:
            grid = resample_profile(above_ground, est.dz, wavelength=est.wavelength)
            inversions = find_temperature_inversions(grid, config.inversion_strength)
            _write_json([vars(inv) for inv in inversions], config.out_dir / f"{path.stem}_inversions.json")
    except Cn2ProfilerError as exc:
        logger.error(f"{path}: {exc}")
        return FileOutcome(str(path), FAILED, error=str(exc))

    logger.info(f"{path}: {len(profile)} level(s) written to {output}")
    return FileOutcome(str(path), PROCESSED, output=str(output), dropped_rows=sounding.dropped_rows)


def cmd_compute(config: RunConfig) -> int:
    """Estimate one C_n² profile per sounding file and write a run summary."""
    paths = _require_files(config.inputs)
    est = estimator_config(config)
    with ThreadPoolExecutor(max_workers=min(len(paths), get_thread_count())) as pool:
        outcomes = list(pool.map(lambda p: _process_sounding(p, config, est), paths))

    counts = Counter(outcome.status for outcome in outcomes)
    summary = {
        PROCESSED: counts[PROCESSED],
        SKIPPED_CEILING: counts[SKIPPED_CEILING],
        FAILED_PARSE: counts[FAILED_PARSE],
        FAILED: counts[FAILED],
        "files": [vars(outcome) for outcome in outcomes],
    }
    _write_json(summary, config.out_dir / SUMMARY_FILE)
    logger.info(
        f"Processed {counts[PROCESSED]}, skipped {counts[SKIPPED_CEILING]} below ceiling, "
        f"{counts[FAILED_PARSE]} unparsable, {counts[FAILED]} failed"
    )
    if counts[FAILED_PARSE] or counts[FAILED]:
        logger.error(f"{counts[FAILED_PARSE] + counts[FAILED]} of {len(paths)} input file(s) failed validation")
        return EXIT_VALIDATION
    if not counts[PROCESSED]:
        msg = f"No profile computed from {len(paths)} input file(s)"
        raise EmptyResultError(msg)
    return EXIT_OK


def cmd_average(config: RunConfig) -> int:
    """Average profile files level by level."""
    profiles = [read_cn2_profile(path) for path in _require_files(config.inputs)]
    rejected: list[Cn2Profile] = []
    if config.reject_outliers is not None:
        profiles, rejected = reject_outlier_profiles(profiles, config.reject_outliers)
        if not profiles:
            msg = "Every profile was rejected as an outlier"
            raise EmptyResultError(msg)

    mean = average_profiles(profiles, config.min_fraction)
    output = write_cn2_profile(mean, config.out_dir / "mean_cn2.csv")
    _write_json(
        {
            "profile_count": mean.profile_count,
            "dropped_levels": mean.dropped_levels,
            "rejected": [p.provenance for p in rejected],
            "output": str(output),
        },
        config.out_dir / SUMMARY_FILE,
    )
    logger.info(f"Averaged {mean.profile_count} profile(s) into {output}")
    return EXIT_OK


def cmd_synth(config: RunConfig) -> int:
    """Write one synthetic fluctuation field."""
    params = SpectrumParams(cn2=config.cn2, L0=config.L0, l0=config.l0)
    field = synthesize_fluctuations(config.samples, config.grid_spacing(), params, config.seed, n0=config.n0)
    buffer = StringIO()
    field.write(buffer)
    output = atomic_write_text(config.out_dir / "synthetic_field.csv", buffer.getvalue())
    logger.info(f"Wrote {config.samples} synthetic sample(s) to {output}")
    return EXIT_OK


def cmd_study(config: RunConfig) -> int:
    """Run the scale-factor study and write its table."""
    table = scale_factor_study(
        config.dz_list,
        config.L0_list,
        config.omega_list,
        config.m_list,
        trials=config.trials,
        seed=config.seed,
        cn2=config.cn2,
        n_samples=config.study_samples,
    )
    output = _write_csv(table.to_frame(), config.out_dir / "scale_factor_study.csv")
    logger.info(f"Wrote {len(table.rows)} study row(s) to {output}")
    return EXIT_OK


def cmd_calibrate(config: RunConfig) -> int:
    """Find the scale factor matching each profile to the reference model."""
    model = PRESETS[config.reference]
    band = CalibrationBand(*config.band)
    report = []
    for path in _require_files(config.inputs):
        profile = read_cn2_profile(path)
        result = calibrate_scale_factor(profile, model, band, config.station_elevation)
        output = write_cn2_profile(profile.scaled(result.c), config.out_dir / f"{path.stem}_calibrated.csv")
        logger.info(f"{path}: c={result.c:.4g}, residual RMS {result.residual_rms:.3f} decades")
        report.append({"input": str(path), "output": str(output), **result.to_dict()})
    summary = {"reference": config.reference, "band": config.band, "profiles": report}
    _write_json(summary, config.out_dir / "calibration.json")
    return EXIT_OK


def _initial_params(config: RunConfig) -> GeneralizedHVParams:
    if config.init in FIT_PRESETS:
        init = FIT_PRESETS[config.init]
    else:
        path = Path(config.init)
        if not path.is_file():
            msg = f"--init must be one of {sorted(FIT_PRESETS)} or a JSON file, got '{config.init}'"
            raise ConfigurationError(msg)
        try:
            raw = json.loads(read_text(path))
        except json.JSONDecodeError as exc:
            msg = f"Initial parameter file {path} is not valid JSON: {exc}"
            raise FormatError(msg) from exc
        init = GeneralizedHVParams.from_dict(raw)
    if config.free is not None:
        unknown = set(config.free) - set(init.names())
        if unknown:
            msg = f"Unknown parameter(s) in --free: {sorted(unknown)}"
            raise ConfigurationError(msg)
        init = replace(init, fixed=frozenset(init.names()) - set(config.free))
    return init


def cmd_fit(config: RunConfig) -> int:
    """Fit the generalized HV model to one profile."""
    (path,) = _require_files(config.inputs)
    profile = read_cn2_profile(path)
    init = _initial_params(config)
    try:
        result = fit_generalized_hv(
            profile, init, n_starts=config.starts, seed=config.seed, station_elevation=config.station_elevation
        )
    except FitError as exc:
        if exc.best is not None:
            _write_json({"converged": False, **exc.best.to_dict()}, config.out_dir / "fit_report.json")
        raise

    _write_json({"converged": True, **result.to_dict()}, config.out_dir / "fit_report.json")
    offset = config.station_elevation or 0.0
    curve = model_curve(lambda z: generalized_hv_cn2(np.asarray(z) + offset, result.params), profile.altitudes)
    _write_csv(curve, config.out_dir / "fit_curve.csv")
    logger.info(f"Fit residual {result.residual:.4g} (RMS {result.rms:.3f} decades) over {result.levels} level(s)")
    return EXIT_OK


def pair_with_model(altitudes: Any, cn2: Any, model: Cn2Profile) -> pd.DataFrame:
    """Pair thermosonde C_n² with a profile on the profile's own grid.

    Thermosonde values are averaged over bins of width dz centred on the grid
    points; only grid points holding both values are kept.
    """
    dz = model.config.dz
    binned = bin_average(zip(altitudes, cn2, strict=True), dz, centred=True)
    measured = {round(centre / dz): value for centre, value in binned}
    estimated = {round(z / dz): float(value) for z, value in zip(model.altitudes, model.cn2, strict=True)}
    common = sorted(set(measured) & set(estimated))
    return pd.DataFrame(
        {
            "altitude_m": [k * dz for k in common],
            "cn2_model": [estimated[k] for k in common],
            "cn2_thermosonde": [measured[k] for k in common],
        }
    )


def _thermo_pair(thermo_path: Path, sounding_path: Path, config: RunConfig, est: EstimatorConfig) -> pd.DataFrame:
    thermo = parse_thermosonde(StringIO(read_text(thermo_path)))
    sounding = load_sounding(sounding_path, config).above_ground()
    z, cn2 = thermosonde_cn2(thermo, sounding)
    return pair_with_model(z, cn2, compute_cn2(sounding, est))


def cmd_thermo(config: RunConfig) -> int:
    """Pair sounding-derived C_n² with thermosonde C_n², flight by flight, then average."""
    paths = _require_files(config.inputs)
    if len(paths) % 2:
        msg = "thermo expects pairs of files: THERMOSONDE SOUNDING [THERMOSONDE SOUNDING ...]"
        raise ConfigurationError(msg)
    est = estimator_config(config)
    frames = []
    for thermo_path, sounding_path in zip(paths[::2], paths[1::2], strict=True):
        frame = _thermo_pair(thermo_path, sounding_path, config, est)
        logger.info(f"{thermo_path.name} / {sounding_path.name}: {len(frame)} paired bin(s)")
        frames.append(frame)

    paired = pd.concat(frames)
    if paired.empty:
        msg = "No altitude bin holds both a thermosonde and a radiosonde estimate"
        raise EmptyResultError(msg)
    grouped = paired.groupby("altitude_m")
    result = grouped.mean()
    result["flights"] = grouped.size()
    _write_csv(result.reset_index(), config.out_dir / "thermo_comparison.csv")
    return EXIT_OK


def compare_with_model(profile: Cn2Profile, model: Callable[[Any], Any], offset: float) -> pd.DataFrame:
    """Per-level log10 ratio of a profile to a model; non-positive levels are left out."""
    keep = profile.cn2 > 0
    z = profile.altitudes[keep]
    values = profile.cn2[keep]
    reference = np.asarray(model(z + offset), dtype=float)
    return pd.DataFrame(
        {
            "altitude_m": z,
            "cn2_profile": values,
            "cn2_model": reference,
            "log10_ratio": np.log10(values) - np.log10(reference),
        }
    )


def cmd_compare(config: RunConfig) -> int:
    """Compare each profile with the reference model."""
    model = PRESETS[config.reference]
    offset = config.station_elevation or 0.0
    if config.station_elevation is None:
        logger.warning("No station elevation given; comparing with the model at the profile altitudes")
    report = []
    for path in _require_files(config.inputs):
        frame = compare_with_model(read_cn2_profile(path), model, offset)
        if frame.empty:
            msg = f"{path}: no positive C_n² level to compare"
            raise InsufficientDataError(msg)
        output = _write_csv(frame, config.out_dir / f"{path.stem}_compare.csv")
        rms = float(np.sqrt(np.mean(frame["log10_ratio"] ** 2)))
        logger.info(f"{path}: RMS log10 ratio to {config.reference} is {rms:.3f}")
        report.append({"input": str(path), "output": str(output), "levels": len(frame), "rms_log10_ratio": rms})
    _write_json({"reference": config.reference, "profiles": report}, config.out_dir / "compare.json")
    return EXIT_OK


HANDLERS: dict[str, Callable[[RunConfig], int]] = {
    "compute": cmd_compute,
    "average": cmd_average,
    "synth": cmd_synth,
    "study": cmd_study,
    "calibrate": cmd_calibrate,
    "fit": cmd_fit,
    "thermo": cmd_thermo,
    "compare": cmd_compare,
}


def parse_run_config(argv: Sequence[str] | None = None) -> RunConfig:
    """Parse the command line and merge it with the config file.

    Raises:
        ConfigurationError: On unknown config keys or invalid values.
    """
    namespace = vars(build_parser().parse_args(argv))
    command = namespace.pop("command")
    inputs = namespace.pop("inputs", [])
    config_path = namespace.pop("config", None)
    return build_run_config(command, inputs, load_config_file(config_path), namespace)


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit code."""
    try:
        config = parse_run_config(argv)
    except ConfigurationError as exc:
        print(f"cn2profiler: error: {exc}", file=sys.stderr)
        return exc.exit_code

    setup_logging(config.out_dir / LOG_FILE, logging.DEBUG if config.verbose else logging.INFO)
    logger.info(f"Starting {config.command} with {len(config.inputs)} input(s)")
    try:
        resolve_scale_factor(config)
        _write_json(config.to_dict(), config.out_dir / RUN_CONFIG_FILE)
        return HANDLERS[config.command](config)
    except Cn2ProfilerError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code
    except OSError as exc:
        logger.error(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
