"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``DataError`` -> 2,
``NumericalError`` -> 3.
"""


class CovidSemError(Exception):
    """Base class for all package errors."""


class ConfigError(CovidSemError, ValueError):
    """Invalid configuration or model specification."""


class DataError(CovidSemError, ValueError):
    """Input data violates a schema or an invariant."""


class NumericalError(CovidSemError, ArithmeticError):
    """A numerical routine could not produce a trustworthy answer."""


class RankDeficientError(NumericalError):
    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"design matrix is rank deficient; dependent columns: {', '.join(self.columns)}")
