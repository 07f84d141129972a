"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value or combination (maps to CLI exit code 2)."""


class SingularTimeError(ValueError):
    """A scheduler formula was evaluated at a time where it divides by zero."""


class MethodSolverMismatch(TypeError):
    """A sampler was invoked on a model trained with an incompatible method."""


class IntegrationError(RuntimeError):
    """Non-finite values appeared during numerical integration."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""
