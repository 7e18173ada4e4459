import logging
import os
import sys
import tempfile
from logging.handlers import RotatingFileHandler
from pathlib import Path

LOGGER_NAMES = ("common", "sounding", "prep", "estimator", "synth", "models", "cli")
THREADS_ENV = "CN2_PROFILER_THREADS"
DATA_DIR_ENV = "CN2_PROFILER_DATA_DIR"


def get_project_root(sentinel: str = "pyproject.toml") -> Path:
    """Get the project root directory by looking for a sentinel file or directory.

    Args:
        sentinel: The sentinel file or directory to look for.

    Returns:
        The project root directory path.

    Raises:
        FileNotFoundError: If the project root cannot be found.
    """
    try:
        return next(p for p in Path(__file__).parents if (p / sentinel).exists())
    except StopIteration as exc:
        msg = f"Project root not found. No '{sentinel}' in parent directories of {__file__}"
        raise FileNotFoundError(msg) from exc


def get_data_file_path(filename: str = "cn2profiler.yaml") -> Path:
    """Get the path to a file in the data directory.

    ``CN2_PROFILER_DATA_DIR`` wins when set; otherwise the ``data/`` directory
    at the project root is used.

    Args:
        filename: The name of the data file.

    Returns:
        The path to the data file (it may not exist).
    """
    env_dir = os.environ.get(DATA_DIR_ENV)
    if env_dir:
        return Path(env_dir) / filename

    try:
        return get_project_root() / "data" / filename
    except FileNotFoundError:
        return Path.cwd() / "data" / filename


def setup_logging(log_file: Path | str | None = None, level: int = logging.INFO) -> logging.Logger:
    """Configure logging with console and optional rotating file handlers.

    Handlers are attached to every top-level package logger so library modules
    can keep using ``logging.getLogger(__name__)``. The file handler limits the
    log to 1MB and keeps 1 backup file.

    Args:
        log_file: Path to the log file, or None for console output only.
        level: Logging level for all handlers.

    Returns:
        The ``cli`` logger.
    """
    formatter = logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")

    handlers: list[logging.Handler] = []
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    handlers.append(console_handler)

    if log_file is not None:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_path,
            maxBytes=1024 * 1024,  # 1MB
            backupCount=1,
        )
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)

    for handler in handlers:
        handler.setLevel(level)

    for name in LOGGER_NAMES:
        logger = logging.getLogger(name)
        logger.setLevel(level)
        # Prevent duplicate handlers if called multiple times
        for old in list(logger.handlers):
            logger.removeHandler(old)
            old.close()
        for handler in handlers:
            logger.addHandler(handler)
        logger.propagate = False

    return logging.getLogger("cli")


def get_thread_count() -> int:
    """Number of worker threads, capped by ``CN2_PROFILER_THREADS`` when set."""
    default = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        logging.getLogger(__name__).warning(f"Ignoring non-integer {THREADS_ENV}={raw!r}")
        return default
    return max(1, min(value, default))


def atomic_write_text(path: Path | str, text: str) -> Path:
    """Write text to ``path`` through a temporary file and a rename.

    Readers never see a partially written file.

    Args:
        path: Destination file.
        text: Content to write.

    Returns:
        The destination path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(
        "w", dir=path.parent, prefix=f".{path.name}.", delete=False, encoding="utf-8"
    ) as f:
        f.write(text)
        tmp_name = f.name
    try:
        os.replace(tmp_name, path)
    except OSError:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path
