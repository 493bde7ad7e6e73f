"""Exception types shared across the package."""


class HybOptError(Exception):
    """Base class for all package errors."""


class NonFiniteValue(HybOptError, FloatingPointError):
    """A primitive produced (or was handed) NaN or Inf."""

    def __init__(self, primitive: str):
        super().__init__(f"non-finite value produced by primitive '{primitive}'")
        self.primitive = primitive


class TapeCorrupt(HybOptError):
    pass


class ShapeError(HybOptError, ValueError):
    pass


class InvalidTimestep(HybOptError, ValueError):
    pass


class UnknownLayer(HybOptError, ValueError):
    pass


class ConfigError(HybOptError, ValueError):
    pass


class TrainingAborted(HybOptError, RuntimeError):
    """Too many steps were skipped because of non-finite values."""
