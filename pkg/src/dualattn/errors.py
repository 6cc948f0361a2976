"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """Input violates an operation's preconditions (shapes, grids, ranges)."""


class InfeasibleSupport(RejectedInput):
    """A target distribution has zero mass where the source requires some."""


class ConvergenceFailure(RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, last_gap=None):
        super().__init__(message)
        self.last_gap = last_gap


class FormatError(ValueError):
    """A binary or text file is malformed, truncated, or of the wrong version."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
