"""Exception types shared across the package."""


class DomainError(ValueError):
    """A parameter or argument lies outside its mathematical domain."""


class DegenerateFilterError(RuntimeError):
    """Every particle weight vanished at some time step.

    Attributes
    ----------
    step : int
        Zero-based time index at which the filter collapsed.
    """

    def __init__(self, step, message=None):
        self.step = int(step)
        super().__init__(message or f"all particle weights are zero at step {self.step}")


class NumericalError(ArithmeticError):
    """A NaN or overflow appeared in an intermediate quantity."""


class UnsupportedModelError(TypeError):
    """An adapter or routine was paired with a model it cannot handle."""


class ConfigError(ValueError):
    """An experiment configuration failed validation."""
