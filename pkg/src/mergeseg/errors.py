"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigurationError -> 2,
DataError -> 3, NumericError -> 4. Everything else is a bug and escapes.
"""


class ConfigurationError(ValueError):
    """A knob (patch size, k, ratio, radius, ...) is outside its valid range."""


class DimensionError(ValueError):
    """Tensor shapes or axes are inconsistent with the operation."""


class DataError(ValueError):
    """Input data violates its contract (labels out of range, non-binary targets)."""


class StateError(RuntimeError):
    """Objects are used in an order or combination their protocol forbids."""


class NumericError(ArithmeticError):
    """A numeric failure (NaN/Inf) was detected; message names the culprit."""
