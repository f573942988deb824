"""Exception hierarchy shared across the package."""


class EKTMError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EKTMError, ValueError):
    """Operand shapes do not conform to an operator's algebra."""


class DomainError(EKTMError, ValueError):
    """An input lies outside an operator's mathematical domain."""


class ContractError(EKTMError, ValueError):
    """A precondition of a call was violated."""


class ConfigError(EKTMError, ValueError):
    """Invalid or unknown configuration."""


class IngestionError(EKTMError, ValueError):
    """Malformed input data. Carries the offending row and column when known."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class SchemaError(EKTMError, ValueError):
    """Dataset does not carry the columns a consumer needs."""


class NumericError(EKTMError, ArithmeticError):
    """A non-finite value appeared in a loss term or gradient check."""

    def __init__(self, message, term=None):
        super().__init__(message if term is None else f"{message}: {term}")
        self.term = term


class CalibrationError(EKTMError, RuntimeError):
    """Synthetic-data intercept search did not converge."""


class UndefinedMetricError(EKTMError, ValueError):
    """A metric is undefined for the given input (e.g. single-class AUC)."""
