"""Exception types shared across the package."""


class MiarError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MiarError, ValueError):
    """Tensor shapes or widths do not match what an operation requires."""


class ConfigError(MiarError, ValueError):
    """A configuration value is invalid or inconsistent."""


class SchemaError(MiarError, ValueError):
    """A configuration document contains unknown keys or wrong types."""


class DataError(MiarError, ValueError):
    """Data values violate an invariant (non-finite, out-of-range labels)."""


class IntegrityError(MiarError):
    """On-disk bytes disagree with their manifest or digest."""


class CheckpointError(MiarError):
    """A checkpoint fails to load or verify."""


class TrainingDivergedError(MiarError):
    """Training produced a non-finite loss; message names the batch."""
