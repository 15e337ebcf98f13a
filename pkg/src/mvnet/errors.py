"""Exception hierarchy shared across the package."""


class MVNetError(Exception):
    """Base class for every error raised by mvnet."""


class InvalidInputError(MVNetError, ValueError):
    pass


class InvalidDepthError(InvalidInputError):
    pass


class InvalidGeometryError(InvalidInputError):
    pass


class DimensionError(InvalidInputError):
    """Shape mismatch inside a layer; the message names the op and axes."""


class UndefinedRatioError(MVNetError, ArithmeticError):
    pass


class UndefinedLossError(MVNetError, ArithmeticError):
    pass


class EmptyCloudError(MVNetError):
    pass


class GridTooLargeError(MVNetError):
    pass


class InvalidQueryError(InvalidInputError):
    pass


class ShapeMismatchError(InvalidInputError):
    pass


class NoPairError(MVNetError):
    pass


class DegenerateProbeError(MVNetError):
    pass


class CheckpointError(MVNetError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TrainStepError(MVNetError):
    """A constituent of a training step failed; wraps the original error."""
