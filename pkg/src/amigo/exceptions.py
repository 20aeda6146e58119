"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration and validation
problems exit with 2, data problems with 3, numerical failures with 4.
"""


class AmigoError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(AmigoError, ValueError):
    exit_code = 2


class DataError(AmigoError, ValueError):
    exit_code = 3


class DegenerateInputError(DataError):
    """Input is structurally valid but too small for the requested operation."""


class DimensionError(AmigoError, ValueError):
    exit_code = 2


class TapeError(AmigoError, RuntimeError):
    """Misuse of the differentiation tape (non-scalar loss, reuse after backward)."""


class NumericalError(AmigoError, ArithmeticError):
    exit_code = 4


class AllCensoredBatchError(NumericalError):
    """A Cox batch without a single observed event has an undefined loss."""

    exit_code = 4


class EvaluationError(AmigoError, ValueError):
    exit_code = 3


class DomainError(NumericalError, ValueError):
    """Argument outside the domain of a function, e.g. log of a non-positive value."""
