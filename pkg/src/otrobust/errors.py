"""Exception types shared across the package.

The CLI maps these onto stable exit codes: configuration problems exit
with 2, unreadable or inconsistent data files with 3, and numerical
failures (training divergence, solver non-convergence, inference
infeasibility) with 4.
"""


class OtrobustError(Exception):
    """Base class for all package errors."""


class ConfigError(OtrobustError):
    """Invalid user-supplied configuration (bad field, missing path)."""


class DataFormatError(OtrobustError):
    """A data file is malformed, truncated, or internally inconsistent."""


class ShapeError(OtrobustError):
    """An array argument does not match the expected dimensions."""


class TrainingError(OtrobustError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class WindowError(OtrobustError):
    """Invalid curvature/smoothness window (requires 0 <= l < L)."""


class SolverError(OtrobustError):
    """The QCP solver failed to reach its tolerance within the iteration cap."""

    def __init__(self, message: str, residual: float | None = None, iterations: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class InferenceError(OtrobustError):
    """Robust inference exhausted its relaxation budget without a feasible window."""


class UndefinedValueError(OtrobustError):
    """A metric is undefined for the given inputs (e.g. zero-norm reference)."""
