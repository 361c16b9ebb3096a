"""Exception hierarchy shared across the package."""


class TUnetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(TUnetError, ValueError):
    """Tensor shapes do not conform for the requested operation."""


class ConfigError(TUnetError, ValueError):
    """A model, training or run configuration is invalid."""


class ContractError(TUnetError, ValueError):
    """A caller violated an operation precondition."""


class ValidationError(TUnetError, ValueError):
    """Input values are outside the domain an operation accepts."""


class FormatError(TUnetError):
    """A binary file does not follow the expected layout.

    Args:
        message: What went wrong.
        offset: Byte offset in the file at which the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TruncatedFileError(FormatError):
    """The file ends before the declared payload does."""


class IntegrityError(TUnetError):
    """Checksum verification failed."""


class SchemaError(TUnetError):
    """A checkpoint does not match the parameter set expected for a config."""


class TrainingError(TUnetError, RuntimeError):
    """Training diverged (non-finite loss)."""
