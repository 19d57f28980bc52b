"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates a documented precondition (shape, range, ordering)."""


class NumericalError(RuntimeError):
    """A factorization or linear solve failed."""


class TrainingError(RuntimeError):
    """Training diverged. ``trace`` holds the loss history up to the failure."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
