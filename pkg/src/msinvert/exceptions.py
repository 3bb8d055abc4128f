"""Exception types raised across the package."""


class MsInvertError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MsInvertError, ValueError):
    pass


class DegenerateFractureError(MsInvertError, ValueError):
    pass


class AssemblyError(MsInvertError, RuntimeError):
    pass


class SolverError(MsInvertError, RuntimeError):
    """Iterative solve did not reach the requested residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateNeighborhoodError(MsInvertError, RuntimeError):
    pass


class SpectralError(MsInvertError, RuntimeError):
    pass


class ForwardSolveError(MsInvertError, RuntimeError):
    pass


class FluxRecoveryError(MsInvertError, RuntimeError):
    pass


class StateError(MsInvertError, RuntimeError):
    pass


class ConfigError(MsInvertError, ValueError):
    pass


class StepRejectedError(MsInvertError, RuntimeError):
    pass
