"""Exception hierarchy shared by the engine and the CLI."""


class TaslError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TaslError, ValueError):
    """Invalid descriptor, hyperparameter or config file."""


class ShapeError(TaslError, ValueError):
    """Batch or tensor shapes do not match the model."""


class ArchMismatchError(TaslError, ValueError):
    """Two models (or a model and a partition) have incompatible layouts."""


class NonFiniteError(TaslError, FloatingPointError):
    """A loss, gradient or parameter became NaN or infinite."""


class CheckpointError(TaslError, ValueError):
    """A checkpoint file is truncated, corrupt or of an unknown version."""


class DataFormatError(TaslError, ValueError):
    """A CSV/JSONL input could not be parsed."""
