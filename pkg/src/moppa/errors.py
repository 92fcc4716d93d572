"""Exception types shared across the package."""


class MoppaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MoppaError):
    """A tensor has the wrong rank, a zero dimension, or mismatched shapes."""


class LayoutError(MoppaError):
    """Head/channel layout is inconsistent (e.g. heads do not divide channels)."""


class ParameterError(MoppaError):
    """Parameter values violate a precondition (e.g. eta <= 0)."""


class ConfigError(MoppaError):
    """Invalid experiment configuration or config file."""


class BudgetError(MoppaError):
    """No feasible low-rank budget matches the adapter parameter count."""


class TapeError(MoppaError):
    """Autodiff tape misuse (backward before forward, foreign nodes, ...)."""


class GradCheckError(MoppaError):
    """Finite-difference gradient check could not be completed."""


class CheckpointError(MoppaError):
    """Checkpoint file is missing, corrupt, or inconsistent."""


class OptimizerError(MoppaError):
    """Optimizer aborted (e.g. non-finite gradient)."""


class DivergenceError(MoppaError):
    """Training loss exceeded the divergence threshold.

    Carries the metric history recorded up to the abort point.
    """

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)
