"""Exception types shared across the package."""


class InfeasibleError(Exception):
    """No solution satisfies the stated constraints (budget, tolerance window)."""


class NumericError(RuntimeError):
    """A numeric routine failed past its safeguards (Cholesky jitter cap, SVD checks)."""


class TrainingError(RuntimeError):
    """Training diverged. Carries the last finite parameter snapshot."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
