"""Exception types shared across the engine."""


class QForgeError(Exception):
    """Base class for all engine errors."""


class ShapeError(QForgeError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(QForgeError, ValueError):
    """A configuration value is missing, inconsistent, or out of range."""


class NumericError(QForgeError, ArithmeticError):
    """A numeric precondition was violated (non-finite input, etc.)."""


class NotReadyError(QForgeError, RuntimeError):
    """A buffer was sampled before it held enough data."""


class CheckpointError(QForgeError, ValueError):
    """A checkpoint file is corrupted or incompatible with the model."""
