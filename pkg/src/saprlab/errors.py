"""Exception hierarchy shared across the package."""


class SaprError(Exception):
    """Base class for all errors raised by saprlab."""


class DimensionError(SaprError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SaprError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(SaprError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(SaprError, ValueError):
    """Invalid experiment or attack configuration."""


class FormatError(SaprError, ValueError):
    """Malformed binary input (IDX, PNM)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(NumericError):
    """Training diverged."""


class CheckpointError(SaprError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTagError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
