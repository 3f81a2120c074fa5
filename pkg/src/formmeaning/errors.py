"""Exception hierarchy. Each family maps to one CLI exit code."""

from __future__ import annotations


class FormMeaningError(Exception):
    exit_code = 1


class ConfigError(FormMeaningError):
    exit_code = 2


class DataError(FormMeaningError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(FormMeaningError):
    exit_code = 4


class TrainingDivergence(NumericError):
    """Raised when the training loss stops being finite.

    ``trajectory`` holds the per-step losses recorded up to the failure.
    """

    def __init__(self, message: str, trajectory: list[float] | None = None):
        self.trajectory = list(trajectory or [])
        super().__init__(message)
