"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config or argument is inconsistent (dimension mismatch, bad field)."""


class IntegrationBlowup(RuntimeError):
    """The integrated state became non-finite or left the trust region.

    Carries the first offending time and step index so divergence times can
    be reported.
    """

    def __init__(self, time, step_index, message=None):
        self.time = float(time)
        self.step_index = int(step_index)
        super().__init__(
            message or f"integration blew up at t={self.time:.6g} (step {self.step_index})"
        )


class GradientFailure(RuntimeError):
    """A non-finite value appeared while evaluating an objective or its gradient."""


class TrainingDiverged(RuntimeError):
    """Optimization loss stayed above the divergence threshold for too long."""
