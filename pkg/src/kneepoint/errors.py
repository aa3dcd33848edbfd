"""Exception types shared across the package."""


class KneepointError(Exception):
    """Base class for all package-specific errors."""


class DataError(KneepointError):
    """Malformed or inconsistent input data (parsing, schema, grouping)."""


class ConvergenceError(KneepointError):
    """Solver failed to reach the requested tolerance.

    Carries the best iterate found so it can be inspected or reused.
    """

    def __init__(self, message, model=None, residual=None):
        super().__init__(message)
        self.model = model
        self.residual = residual


class CalibrationError(KneepointError):
    """Calibration could not produce any feasible hypothesis."""
