"""Exception types shared across the package."""


class MaskDiffError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MaskDiffError):
    """Operands have incompatible shapes for the requested operation."""


class ConfigError(MaskDiffError):
    """A configuration value or combination of values is invalid."""


class NumericError(MaskDiffError):
    """A numeric-domain failure: NaN/Inf results, negative radicands, etc."""


class CheckpointError(MaskDiffError):
    """A checkpoint file is malformed, truncated, or version-incompatible."""
