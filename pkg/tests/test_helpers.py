import logging
from unittest.mock import patch

import pytest

from common.errors import (
    EXIT_EMPTY,
    EXIT_NUMERICAL,
    EXIT_USAGE,
    EXIT_VALIDATION,
    ConfigurationError,
    EmptyResultError,
    FitError,
    GridMismatchError,
    InsufficientSpanError,
    SizeError,
)
from common.helpers import (
    LOGGER_NAMES,
    atomic_write_text,
    get_data_file_path,
    get_project_root,
    get_thread_count,
    setup_logging,
)


def test_get_project_root_finds_manifest():
    assert (get_project_root() / "pyproject.toml").exists()


def test_get_project_root_missing_sentinel():
    with pytest.raises(FileNotFoundError):
        get_project_root(sentinel="no-such-sentinel-file.toml")


def test_get_data_file_path_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("CN2_PROFILER_DATA_DIR", str(tmp_path))
    assert get_data_file_path("x.yaml") == tmp_path / "x.yaml"


def test_get_data_file_path_defaults_to_project_data(monkeypatch):
    monkeypatch.delenv("CN2_PROFILER_DATA_DIR", raising=False)
    assert get_data_file_path() == get_project_root() / "data" / "cn2profiler.yaml"


def test_get_thread_count_respects_cap(monkeypatch):
    with patch("os.cpu_count", return_value=8):
        monkeypatch.setenv("CN2_PROFILER_THREADS", "3")
        assert get_thread_count() == 3  # noqa: PLR2004
        monkeypatch.setenv("CN2_PROFILER_THREADS", "64")
        assert get_thread_count() == 8  # noqa: PLR2004
        monkeypatch.setenv("CN2_PROFILER_THREADS", "0")
        assert get_thread_count() == 1
        monkeypatch.setenv("CN2_PROFILER_THREADS", "many")
        assert get_thread_count() == 8  # noqa: PLR2004
        monkeypatch.delenv("CN2_PROFILER_THREADS")
        assert get_thread_count() == 8  # noqa: PLR2004


def test_setup_logging_writes_file_without_duplicates(tmp_path):
    log_file = tmp_path / "out" / "cn2profiler.log"
    setup_logging(log_file)
    logger = setup_logging(log_file)

    assert logger.name == "cli"
    for name in LOGGER_NAMES:
        assert len(logging.getLogger(name).handlers) == 2  # noqa: PLR2004

    logging.getLogger("estimator.estimator").info("estimated 12 levels")
    for handler in logging.getLogger("estimator").handlers:
        handler.flush()
    content = log_file.read_text()
    assert content.count("estimated 12 levels") == 1
    assert " - INFO - " in content


def test_setup_logging_console_only():
    setup_logging(level=logging.DEBUG)
    assert len(logging.getLogger("synth").handlers) == 1
    assert logging.getLogger("synth").level == logging.DEBUG


def test_atomic_write_text_replaces_content(tmp_path):
    target = tmp_path / "nested" / "profile.csv"
    atomic_write_text(target, "first")
    atomic_write_text(target, "second")
    assert target.read_text() == "second"
    assert [p.name for p in target.parent.iterdir()] == ["profile.csv"]


def test_atomic_write_text_cleans_up_on_failure(tmp_path):
    target = tmp_path / "out" / "summary.json"
    with patch("os.replace", side_effect=OSError("disk full")):
        with pytest.raises(OSError):
            atomic_write_text(target, "{}")
    assert list(target.parent.iterdir()) == []


@pytest.mark.parametrize(
    ("error", "code"),
    [
        (ConfigurationError("x"), EXIT_USAGE),
        (InsufficientSpanError("x"), EXIT_VALIDATION),
        (SizeError("x"), EXIT_VALIDATION),
        (GridMismatchError("x"), EXIT_VALIDATION),
        (FitError("x"), EXIT_NUMERICAL),
        (EmptyResultError("x"), EXIT_EMPTY),
    ],
)
def test_exit_codes(error, code):
    assert error.exit_code == code


def test_fit_error_carries_best():
    error = FitError("no start converged", best={"residual": 1.0})
    assert error.best == {"residual": 1.0}
    assert str(error) == "no start converged"
