"""Exception hierarchy and the process exit codes used by the CLI."""

from __future__ import annotations

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FORMAT = 4
EXIT_TRAINING = 5


class PrivembedError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PrivembedError):
    """Invalid, unknown, or inconsistent configuration."""


class DataError(PrivembedError):
    """Input data violates a documented precondition."""


class DegenerateBatchError(DataError):
    """Batch too small to compute batch statistics."""


class DegenerateInputError(DataError):
    """Zero-norm or otherwise degenerate input vectors."""


class MetricError(DataError):
    """Score set unsuitable for the requested metric (e.g. one class only)."""


class BudgetError(DataError):
    """Invalid privacy-budget bookkeeping request."""


class ShapeError(PrivembedError):
    """Tensor shapes inconsistent with the requested operation."""


class FormatError(PrivembedError):
    """Malformed binary or text artifact; messages carry a byte offset."""


class StateError(PrivembedError):
    """Operation applied to a model in the wrong lifecycle state."""


class TrainingDivergenceError(PrivembedError):
    """Training produced a non-finite loss.

    ``trace`` holds whatever per-step records were accumulated before the
    divergence so the caller can dump them for diagnosis.
    """

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the documented CLI exit code."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FormatError):
        return EXIT_FORMAT
    if isinstance(exc, TrainingDivergenceError):
        return EXIT_TRAINING
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, PrivembedError):
        return EXIT_FAILURE
    return EXIT_FAILURE
