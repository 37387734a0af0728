"""Exception hierarchy shared across the package."""


class DeepPriorError(Exception):
    """Base class for all package errors."""


class DimensionError(DeepPriorError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(DeepPriorError, ValueError):
    """A value lies outside the domain of a function (e.g. log of a nonpositive number)."""


class ContractError(DeepPriorError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NumericError(DeepPriorError, ArithmeticError):
    """A computation produced non-finite values."""


class ConfigurationError(DeepPriorError, ValueError):
    """Invalid configuration or construction parameters."""


class FormatError(DeepPriorError, ValueError):
    """A serialized file is corrupted, truncated, or of an unsupported version."""


class DegenerateClassError(ContractError):
    """Leave-one-out scoring requested for a class with a single example."""


class TrainingDiverged(DeepPriorError, RuntimeError):
    """Training produced a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
