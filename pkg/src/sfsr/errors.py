"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor/image shapes are incompatible with an operation."""


class NumericError(RuntimeError):
    """Raised on non-finite values or other numeric failures."""


class DataError(ValueError):
    """Raised for malformed datasets or image files."""


class CheckpointError(ValueError):
    """Raised when a checkpoint file is corrupt or inconsistent."""
