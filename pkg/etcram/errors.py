class EtcramError(Exception):
    pass


class DomainError(EtcramError, ValueError):
    """An argument or configured value is outside the model's domain."""


class DataFileError(EtcramError, OSError):
    """A data file is missing, unreadable, or malformed."""


class SolverError(EtcramError, RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class ConvergenceError(EtcramError, RuntimeError):
    def __init__(self, message: str, estimates: tuple[float, float] = (float("nan"), float("nan"))):
        super().__init__(message)
        self.estimates = estimates


class ReadWindowWarning(UserWarning):
    """Read bias outside the Ohmic window of the device."""


class GridClampWarning(UserWarning):
    """Pulse outside the update map grid, clamped to its nearest edge."""
