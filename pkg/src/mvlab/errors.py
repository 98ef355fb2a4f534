"""Exception hierarchy.  CLI exit codes hang off these classes."""


class MVLabError(Exception):
    exit_code = 1


class ConfigError(MVLabError, ValueError):
    """Malformed config, missing parameter, or inconsistent settings."""

    exit_code = 2


class UnsupportedModelError(MVLabError, ValueError):
    exit_code = 2


class NumericalError(MVLabError, RuntimeError):
    exit_code = 3


class NonConvergenceError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BlowUpError(NumericalError):
    def __init__(self, particle: int, time: float, value=None):
        super().__init__(f"particle {particle} left the finite region at t={time:.6g} (value {value})")
        self.particle = particle
        self.time = time
        self.value = value


class ClaimFailure(MVLabError):
    exit_code = 4
