"""Exception types raised by the tensor library."""


class DimensionError(ValueError):
    """Operand shapes are inconsistent with the operation."""


class GeometryError(ValueError):
    """A window/kernel does not fit the input (non-positive output length)."""


class DegenerateStatisticsError(ValueError):
    """Batch statistics are undefined (e.g. a single element per channel)."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""
