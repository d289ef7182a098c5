"""Exception types raised across the package."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class UnsupportedSizeError(ValueError):
    """Problem size beyond what a brute-force routine is allowed to handle."""


class DegenerateInputError(ValueError):
    """Input for which the requested quantity does not exist (e.g. constant losses)."""


class ConvergenceError(RuntimeError):
    """An iterative solver exited without meeting its feasibility tolerance.

    The last iterate is kept on ``iterate`` for diagnosis.
    """

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class TrainingDivergedError(RuntimeError):
    """Non-finite loss during training; ``trace`` holds the epochs completed so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
