"""Exception hierarchy shared by the estimator, the I/O layer and the CLI."""


class LatgrowthError(Exception):
    """Base class for all package errors."""


class InputError(LatgrowthError, ValueError):
    """Malformed model configuration, data file or argument."""


class NumericalError(LatgrowthError, ArithmeticError):
    """A numerical step could not be completed."""


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, block: str, message: str | None = None):
        self.block = block
        super().__init__(f"{block}: {message}" if message else f"{block} is not positive-definite")


class SingularDesignError(NumericalError):
    """A normal-equations system is singular (collinear design or collapsed factor)."""


class InnerIterationError(NumericalError):
    """Newton-Raphson inner loop did not converge."""

    def __init__(self, message: str, last_iterate, gradient_norm: float):
        self.last_iterate = last_iterate
        self.gradient_norm = gradient_norm
        super().__init__(f"{message} (gradient norm {gradient_norm:.3e})")


class DegenerateVarianceWarning(UserWarning):
    """A residual variance hit its floor (near-Heywood case)."""


class StandardErrorWarning(UserWarning):
    """Standard errors unavailable: the Hessian is not negative-definite."""


class SparseCellWarning(UserWarning):
    """An observed count has (numerically) zero expected frequency."""
