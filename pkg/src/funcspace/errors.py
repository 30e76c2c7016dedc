"""Exception hierarchy shared across the package."""


class FuncspaceError(Exception):
    """Base class for all errors raised by funcspace."""


class ConfigError(FuncspaceError, ValueError):
    """Invalid configuration (architecture, hyperparameters, experiment file)."""


class ShapeError(FuncspaceError, ValueError):
    """Array shapes or lengths are incompatible."""


class UsageError(FuncspaceError, ValueError):
    """An operation was called without the inputs it requires."""


class DivergenceError(FuncspaceError, ArithmeticError):
    """An iterative inner loop diverged."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals
