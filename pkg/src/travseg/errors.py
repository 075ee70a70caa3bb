"""Shared exception types.

The CLI maps these onto exit codes: validation-style errors exit 2,
numeric failures exit 3.
"""


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are incompatible for an operation."""


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class ContractError(RuntimeError):
    """An API was used outside its contract (not a data problem)."""


class ConfigError(ValueError):
    """A required configuration value is missing or inconsistent."""


class EmptyRegionError(ValueError):
    """A mask polarity has no support at feature resolution."""


class NumericError(ArithmeticError):
    """A numeric invariant failed (NaN/Inf, divergence, failed check)."""


class SamplingError(RuntimeError):
    """Episode sampling could not satisfy its invariants."""
