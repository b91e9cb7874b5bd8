"""Exception taxonomy shared by all modules."""


class MsClipError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(MsClipError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(MsClipError, ValueError):
    """A configuration value or combination of values is invalid."""


class ContractError(MsClipError, RuntimeError):
    """A documented precondition of an operation was violated."""


class StateError(MsClipError, RuntimeError):
    """An object is not in the state required for the operation."""


class NumericError(MsClipError, ArithmeticError):
    """Non-finite or otherwise unusable numeric values were encountered."""


class InputError(MsClipError, ValueError):
    """User-supplied data (tokens, manifests, grounded pairs) is malformed."""
