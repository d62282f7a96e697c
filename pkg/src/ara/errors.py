"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid system configuration (bad dimensions, K > N, ...)."""


class SweepSpecError(ValueError):
    """Malformed sweep specification passed to the experiment driver."""


class NumericError(RuntimeError):
    """Unrecoverable numerical failure inside a receiver.

    Carries optional context about where the failure happened so the
    harness can report it (iteration index, antenna, operation).
    """

    def __init__(self, msg, iteration=None, antenna=None):
        if iteration is not None:
            msg = f"{msg} (iteration {iteration}"
            msg += f", antenna {antenna})" if antenna is not None else ")"
        super().__init__(msg)
        self.iteration = iteration
        self.antenna = antenna
