"""Exception hierarchy. Each family maps to a distinct CLI exit code."""

from __future__ import annotations


class SteerCotError(Exception):
    exit_code = 1


class InputError(SteerCotError, ValueError):
    exit_code = 2


class SchemaError(InputError):
    exit_code = 3


class CapacityError(InputError):
    """Sequence does not fit the model context."""

    exit_code = 4


class DivergenceError(SteerCotError, RuntimeError):
    """Training produced a non-finite loss.

    ``last_good`` holds the most recent finite parameter snapshot (a state dict),
    when one exists.
    """

    exit_code = 5

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DegenerateDataError(SteerCotError, ValueError):
    exit_code = 6


class DegeneratePairError(DegenerateDataError):
    def __init__(self, pair_index: int, message: str | None = None):
        super().__init__(message or f"pair {pair_index} has a zero-length difference vector")
        self.pair_index = pair_index


class EmptyStageError(DegenerateDataError):
    pass


class UndefinedMetricError(DegenerateDataError):
    pass


class GateError(SteerCotError, RuntimeError):
    """A quality gate between pipeline stages was not met."""

    exit_code = 7
