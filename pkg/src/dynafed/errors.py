"""Exception hierarchy shared by every subpackage."""


class DynafedError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DynafedError, ValueError):
    """Bad input: shapes, configuration values, malformed datasets."""


class ConfigError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class NumericOverflowError(DynafedError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message, node_label=None):
        super().__init__(message)
        self.node_label = node_label


class DivergenceError(NumericOverflowError):
    """Parameters became non-finite during training.

    ``step`` is the unroll step (or the flat minibatch counter for local
    training); ``epoch``/``batch`` are set when known.
    """

    def __init__(self, message, step=None, epoch=None, batch=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.batch = batch


class UndefinedMetricError(DynafedError, ArithmeticError):
    pass


class DegenerateSegment(DynafedError):
    """w_start equals w_target, the normalized distance has no scale."""


class DegenerateTrajectoryError(DynafedError):
    pass


class InfeasiblePartitionError(ValidationError):
    pass


class CannotFitError(ValidationError):
    pass


class ParseError(ValidationError):
    """Binary parse failure; ``offset`` is the byte position involved."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(ParseError):
    pass


class BadVersionError(ParseError):
    pass


class TruncatedFileError(ParseError):
    pass
