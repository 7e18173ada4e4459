"""Exception hierarchy shared by all packages.

Each class carries the exit code the command-line tool returns for it.
"""

from typing import Any

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4
EXIT_EMPTY = 5


class Cn2ProfilerError(Exception):
    """Base class for every error raised by the library."""

    exit_code = EXIT_USAGE


class ConfigurationError(Cn2ProfilerError):
    """Invalid flags, unknown config keys or inconsistent settings."""

    exit_code = EXIT_USAGE


class ValidationError(Cn2ProfilerError):
    """Input data or parameters violate a physical or structural constraint."""

    exit_code = EXIT_VALIDATION


class FormatError(ValidationError):
    """A file does not follow the expected layout."""


class InsufficientDataError(ValidationError):
    """Not enough levels, points or samples to carry out an operation."""


class InsufficientSpanError(InsufficientDataError):
    """The altitude span is too short for the requested grid spacing."""


class AlignmentError(ValidationError):
    """A separation is not an integer multiple of the grid spacing."""


class SizeError(ValidationError):
    """A sample count is not a power of two."""


class GridMismatchError(ValidationError):
    """Profiles that must share a grid and configuration do not."""


class NumericalError(Cn2ProfilerError):
    """A numerical procedure failed to converge."""

    exit_code = EXIT_NUMERICAL


class FitError(NumericalError):
    """Every start of a multi-start fit failed to converge.

    The best result found so far is attached as ``best`` for diagnostics.
    """

    def __init__(self, msg: str, best: Any = None):
        super().__init__(msg)
        self.best = best


class EmptyResultError(Cn2ProfilerError):
    """A command finished without producing any output."""

    exit_code = EXIT_EMPTY
