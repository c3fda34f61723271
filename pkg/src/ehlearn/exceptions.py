"""Exception types raised by the simulator and the learners."""


class EHLearnError(Exception):
    """Base class for package-specific errors."""


class DivergenceError(EHLearnError):
    """Policy parameters left the trust region during training.

    Carries the iteration index and the offending parameter norm so a
    caller can log and skip the task.
    """

    def __init__(self, message, iteration=None, weight_norm=None):
        super().__init__(message)
        self.iteration = iteration
        self.weight_norm = weight_norm


class ConvergenceError(EHLearnError):
    """An iterative solver hit its sweep budget before meeting tolerance.

    The best iterate found so far is attached as ``encoding`` so callers
    can inspect or salvage it.
    """

    def __init__(self, message, encoding=None):
        super().__init__(message)
        self.encoding = encoding


class SnapshotFormatError(EHLearnError):
    """A knowledge-base snapshot file is malformed or truncated."""


class SnapshotVersionError(EHLearnError):
    """A knowledge-base snapshot was written by an unsupported format version."""

    def __init__(self, message, found=None, supported=None):
        super().__init__(message)
        self.found = found
        self.supported = supported
