"""Exception hierarchy shared by every module of the package."""


class SelfFusionError(Exception):
    """Base class for all package errors."""


class DimensionError(SelfFusionError, ValueError):
    """Tensor shapes do not conform for the requested operation."""


class ContractError(SelfFusionError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(SelfFusionError, ValueError):
    """Invalid model or training configuration."""


class DataError(SelfFusionError, ValueError):
    """Malformed point-cloud data or dataset files."""


class DivergenceError(SelfFusionError, ArithmeticError):
    """Training produced a non-finite loss."""
