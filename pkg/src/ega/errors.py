"""Exception hierarchy shared by every ega module."""


class EgaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EgaError, ValueError):
    pass


class LabelError(EgaError, ValueError):
    pass


class ContractError(EgaError, ValueError):
    """A precondition of an operation was violated by the caller."""


class GraphConsumedError(EgaError, RuntimeError):
    pass


class DegenerateBatchError(EgaError, ValueError):
    pass


class ConfigError(EgaError, ValueError):
    """Invalid configuration. ``line`` is set when parsed from a file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointFormatError(EgaError, ValueError):
    pass


class DatasetFormatError(EgaError, ValueError):
    pass


class NumericError(EgaError, ArithmeticError):
    pass


class AttackDivergenceError(NumericError):
    pass


class CapabilityError(ContractError):
    """The input lacks data needed for the requested computation."""
