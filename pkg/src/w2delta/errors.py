"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A parameter or configuration value is out of its admissible range."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its budget.

    The residual history is attached so callers can inspect the stall.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class CoverGapError(RuntimeError):
    """A family of boundary charts fails to cover the requested boundary portion."""

    def __init__(self, message, uncovered=None):
        super().__init__(message)
        self.uncovered = uncovered
