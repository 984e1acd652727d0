"""Exception types shared across the package."""


class IlmFusionError(Exception):
    """Base class for all package errors."""


class DimensionError(IlmFusionError, ValueError):
    """Operand shapes do not agree."""


class ContractError(IlmFusionError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class InputError(IlmFusionError, ValueError):
    """User-supplied data is empty or malformed."""


class AlignmentError(InputError):
    """Two sides of a parallel resource have different line counts."""


class LengthError(InputError):
    """A sequence exceeds the supported maximum length."""


class FormatError(IlmFusionError, ValueError):
    """A serialized file is corrupt or of the wrong kind."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(IlmFusionError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ConfigError(IlmFusionError, ValueError):
    """A configuration value is missing or invalid."""
