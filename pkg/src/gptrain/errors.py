"""Exception hierarchy shared by all gptrain modules."""


class GPTrainError(Exception):
    """Base class for every error raised by gptrain."""


class DomainError(GPTrainError, ValueError):
    """An argument lies outside the domain of the operation."""


class TransformOverflowError(GPTrainError, OverflowError):
    """A flat coordinate maps to an infinite natural hyperparameter."""


class UsageError(GPTrainError, ValueError):
    """Inconsistent or mismatched arguments."""


class NumericError(GPTrainError, ArithmeticError):
    """Factorization failure.

    ``pivot`` is the 1-based index of the leading minor that was not
    positive definite, when known.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class DegenerateDataError(GPTrainError, ValueError):
    """Data for which the scale profile is undefined (y identically zero)."""


class OptimizationError(GPTrainError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class LaplaceUntrustedError(GPTrainError, RuntimeError):
    """The Hessian at the reported peak is not positive definite.

    ``diagnostics`` holds the boundary distances and basin count so the
    caller can inspect the fit.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UnreliableEstimateError(GPTrainError, RuntimeError):
    """Monte-Carlo estimate with too few effective samples."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ParseError(GPTrainError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class InsufficientDataError(GPTrainError, ValueError):
    pass


class SelectionError(GPTrainError, ValueError):
    pass
