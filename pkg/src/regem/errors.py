"""Exception hierarchy shared by every estimator in the package."""


class RegemError(Exception):
    """Base class for all errors raised by regem."""


class DataError(RegemError, ValueError):
    """The dataset violates a structural requirement (shape, missingness)."""


class CSVParseError(DataError):
    """A CSV file could not be turned into a Dataset.

    ``line`` is the 1-based physical line number of the offending record,
    or ``None`` when the problem is not tied to a single line.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SingularSystemError(RegemError, ArithmeticError):
    """Normal equations are singular or have no residual degrees of freedom.

    With too many missing values the complete-case cross-product matrix
    becomes singular and not all parametric functions are estimable.
    """


class ConstraintError(RegemError, ValueError):
    """A constraint specification is malformed or infeasible."""


class BootstrapError(RegemError, RuntimeError):
    """Too many bootstrap replicates had to be discarded."""
