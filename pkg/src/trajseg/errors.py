"""Exception types shared across the package."""


class TrajsegError(Exception):
    """Base class for all trajseg errors."""


class InvalidInputError(TrajsegError, ValueError):
    """An input violates a documented precondition (shape, finiteness, ...)."""


class RangeError(TrajsegError, ValueError):
    """An index, rank or frame parameter is out of its valid range."""


class DegenerateInputError(TrajsegError, ValueError):
    """The input is too degenerate for the algorithm to proceed."""


class UndefinedMetricError(TrajsegError, ValueError):
    """The requested metric is undefined for the given inputs."""


class DivergenceError(TrajsegError, RuntimeError):
    """An iterative solver failed to make progress.

    ``diagnostics`` carries whatever the solver recorded up to the abort
    (residual history, step losses, iteration counts).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics if diagnostics is not None else {}
