"""Exception types shared across the library."""


class DimensionMismatchError(ValueError):
    """An operator or vector was used with an incompatible dimension."""


class NumericError(ArithmeticError):
    """A NaN or infinity surfaced where a finite value was required."""


class ConvergenceError(RuntimeError):
    """An iterative solve failed and the caller did not opt into partial results."""


class BracketError(RuntimeError):
    """A root bracket could not be established for the delta line search."""


class BudgetError(RuntimeError):
    """A configured sample or iteration budget was exceeded."""
