"""Exception hierarchy. Each class maps onto one CLI exit code."""


class CgdynError(Exception):
    exit_code = 1


class ConfigError(CgdynError):
    exit_code = 2


class NumericalError(CgdynError):
    """Divergence, non-finite state, failed Newton projection, or a singular reaction-coordinate gradient."""

    exit_code = 3

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class InsufficientSamplesError(CgdynError):
    exit_code = 4
