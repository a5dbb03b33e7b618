"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes.
"""


class MustError(Exception):
    """Base class for all library errors."""


class DimensionError(MustError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MustError, ValueError):
    """A documented precondition of an operation was violated."""


class ParameterError(MustError, ValueError):
    """A configuration or hyperparameter value is out of range."""


class DataError(MustError, ValueError):
    """Input data is malformed, inconsistent or missing."""


class DegenerateInputError(DataError):
    """Input is well-formed but carries no usable content (e.g. fully masked)."""


class NumericalError(MustError, ArithmeticError):
    """NaN/Inf encountered during training or gradient evaluation.

    ``checkpoint`` holds the last good parameter snapshot when one exists.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
