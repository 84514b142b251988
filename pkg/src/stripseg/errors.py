"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigError(ValueError):
    """A config file or config value is invalid (unknown key, bad literal)."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf; message names the first offending block."""


class CheckpointError(IOError):
    """Base class for checkpoint file problems."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class CheckpointTruncatedError(CheckpointError):
    """File ended in the middle of a record; message names the tensor."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the expected block dimensions."""


class PgmError(IOError):
    """Base class for PGM file problems."""


class PgmHeaderError(PgmError):
    """Missing P5 magic or malformed width/height fields."""


class PgmMaxvalError(PgmError):
    """Maxval is not 255."""


class PgmPayloadError(PgmError):
    """Pixel payload shorter than width*height."""
