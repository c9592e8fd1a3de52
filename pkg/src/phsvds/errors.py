"""Exception types shared across the package."""


class ContractError(ValueError):
    """Input violates a documented precondition (shape, symmetry, ...)."""


class MatrixMarketError(ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class RankDeficiencyError(ArithmeticError):
    """A new column lies numerically in the span of an orthonormal basis."""


class FactorizationError(ArithmeticError):
    """A factorization hit an exact (or structural) singularity."""

    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message)


class NotConvergedError(RuntimeError):
    """Iteration budget exhausted; ``partial`` carries whatever converged."""

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)


class RefusedError(ValueError):
    """The requested dense path is too large for this build."""
