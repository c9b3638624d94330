"""Exception types shared across the package."""


class PegoError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(PegoError):
    """Operands have incompatible dimensions."""


class NumericError(PegoError):
    """A computation produced non-finite values or failed to converge."""


class DegenerateInputError(PegoError):
    """Input is structurally valid but carries no usable signal."""


class ConfigError(PegoError):
    """A configuration value violates its documented constraints."""


class SplitError(PegoError):
    """A dataset cannot be partitioned as requested."""


class InputError(PegoError):
    """A runtime input (batch, sample) is unusable."""


class InconclusiveCheckError(PegoError):
    """A verification run rejected too many probes to give a verdict."""


class CheckpointError(PegoError):
    """A checkpoint file is missing, truncated, or malformed."""
