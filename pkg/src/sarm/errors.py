"""Exception hierarchy shared across the pipeline.

The CLI maps each family onto an exit code, so raise the most specific one.
"""


class SarmError(Exception):
    """Base class for all package errors."""


class ValidationError(SarmError, ValueError):
    """Input data violates a structural contract (ids, schemes, shapes)."""


class SchemaError(ValidationError):
    """A file on disk carries an unknown or mismatched schema version."""


class TrajectoryTooShort(ValidationError):
    """The trajectory cannot host the requested sampling geometry."""


class NumericalError(SarmError, ArithmeticError):
    """Training produced a non-finite loss or parameter."""


class SimulationError(SarmError, RuntimeError):
    """The simulator could not construct a trajectory satisfying its class."""
