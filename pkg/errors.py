class BlowupError(Exception):
    """Base class of every error raised by the solver library."""

    exit_code = 1


class ConfigError(BlowupError):
    exit_code = 2


class DiscretizationError(ConfigError):
    """Invalid builder or initial-profile arguments."""


class NumericalError(BlowupError):
    exit_code = 3


class SpectralConvergenceError(NumericalError):
    def __init__(self, message, fallback=None, iterations=0, residual=float('nan')):
        super().__init__(message)
        # Gershgorin-style upper bound the caller may use instead
        self.fallback = fallback
        self.iterations = iterations
        self.residual = residual


class LinearSolveError(NumericalError):
    pass


class DiagnosticsError(NumericalError):
    pass


class OracleError(BlowupError):
    exit_code = 4
