"""Length-steered chain-of-thought compression on a small from-scratch decoder."""

from .errors import (
    CapacityError,
    DegenerateDataError,
    DegeneratePairError,
    DivergenceError,
    EmptyStageError,
    GateError,
    InputError,
    SchemaError,
    SteerCotError,
    UndefinedMetricError,
)

__version__ = "0.1.0"
