"""Exception types shared across the package."""


class MaskshareError(Exception):
    """Base class for package errors."""


class DimensionError(MaskshareError, ValueError):
    """An array or mask does not match the network it is used with."""


class NumericError(MaskshareError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ContractError(MaskshareError, RuntimeError):
    """An API precondition was violated (stale trace, bad action, dangling id)."""


class MaskConfigurationError(MaskshareError, ValueError):
    """A mask could not be generated with at least one active neuron per layer."""
