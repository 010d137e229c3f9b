"""Exception types shared across the package."""


class TransportOpsError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(TransportOpsError, ValueError):
    """Operand shapes are inconsistent or not as required."""


class DomainError(TransportOpsError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class NumericalError(TransportOpsError, ArithmeticError):
    """A computation produced non-finite values.

    ``step`` records the loop index at which the failure occurred, when
    the failing operation is iterative.
    """

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class FormatError(TransportOpsError, ValueError):
    """A file or document does not conform to its expected format."""


class ConsistencyError(TransportOpsError, ValueError):
    """Structurally valid inputs that disagree with each other."""


class PreconditionError(TransportOpsError, ValueError):
    """An operation was invoked without its required preconditions."""
