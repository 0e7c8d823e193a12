"""Exception hierarchy shared by every module of the package."""


class TnfError(Exception):
    """Base class for all errors raised by tri_branch_fusion."""

    pass


class DimensionError(TnfError, ValueError):
    """Raised when tensor shapes are incompatible for an operation."""

    pass


class ConfigurationError(TnfError, ValueError):
    """Raised for invalid configuration values or architecture mismatches."""

    pass


class ValidationError(TnfError, ValueError):
    """Raised for invalid inputs such as out-of-range labels."""

    pass


class ContractError(TnfError):
    """Raised when an operation's precondition is violated."""

    pass


class NonFiniteError(TnfError, ArithmeticError):
    """Raised when an operation produces NaN or infinite values."""

    pass


class NormalizationError(TnfError, ArithmeticError):
    """Raised when a zero-norm vector cannot be normalized."""

    pass


class GraphError(TnfError):
    """Raised when a tensor is not on the gradient path of an output."""

    pass


class TrainingDivergedError(TnfError):
    """Raised when training produces a non-finite loss."""

    pass


class DataError(TnfError):
    """Raised for unreadable, corrupt or inconsistent dataset files."""

    pass
