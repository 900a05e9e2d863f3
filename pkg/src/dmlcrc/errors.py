"""Exception hierarchy shared by every module.

The CLI maps the three families below onto exit codes: configuration
problems exit 1, data problems exit 2, numeric failures exit 3.
"""


class DmlCrcError(Exception):
    """Base class for all package errors."""


class ConfigError(DmlCrcError):
    pass


class DataError(DmlCrcError):
    pass


class NumericError(DmlCrcError):
    pass


class DimensionMismatch(DmlCrcError, ValueError):
    pass


# -- data ---------------------------------------------------------------

class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyFile(DataError):
    pass


class RaggedRows(ParseError):
    pass


class ZeroColumn(DataError):
    def __init__(self, index):
        super().__init__(f"column {index} has zero norm")
        self.index = index


class ClassTooSmall(DataError):
    def __init__(self, label, size, k):
        super().__init__(f"class {label} has {size} samples, fewer than k={k} folds")
        self.label = label


class InvalidScheme(ConfigError):
    pass


# -- numerics -----------------------------------------------------------

class NonFinite(NumericError):
    pass


class NotPositiveDefinite(NumericError):
    pass


class SingularSystem(NumericError):
    pass


class SingularGram(SingularSystem):
    pass


class AllInfinite(NumericError):
    """Every class residual is +inf, so no argmin exists."""


class Diverged(NumericError):
    pass
