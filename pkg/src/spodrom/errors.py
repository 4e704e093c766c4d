"""Exception hierarchy shared by every stage of the model.

Plain precondition violations raise ``ValueError`` (or a subclass below) so
callers can keep using the usual idiom.
"""


class SpodromError(Exception):
    """Base class for all package-specific errors."""


class FormatError(SpodromError):
    """A binary file has the wrong magic number or version."""


class CorruptFileError(SpodromError):
    """A binary file is truncated or its sizes disagree with its header."""


class InvalidDataError(SpodromError, ValueError):
    """Data violates a documented invariant (non-uniform times, NaNs, ...)."""


class InsufficientDataError(SpodromError, ValueError):
    """Not enough snapshots for the requested operation."""


class NumericError(SpodromError, ArithmeticError):
    """A linear-algebra kernel failed or produced an unusable result."""


class UndefinedMetricError(SpodromError, ArithmeticError):
    """A metric is undefined for the given input, e.g. zero reference energy."""


class TrainingDivergedError(SpodromError, FloatingPointError):
    """A loss or gradient became non-finite during training."""


class RolloutDivergedError(SpodromError, FloatingPointError):
    """Closed-loop prediction produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SearchFailedError(SpodromError):
    """Every hyperparameter trial diverged."""


class StageError(SpodromError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
