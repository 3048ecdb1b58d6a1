"""Exception types shared across the package."""


class IconsimError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(IconsimError, ValueError):
    """Raised when tensor shapes are incompatible for an operation."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class FormatError(IconsimError, ValueError):
    """Raised when a file does not conform to its expected on-disk format."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class UnknownVersionError(FormatError):
    """File carries a format version this build does not understand."""


class TruncatedFileError(FormatError):
    """File ended before all declared content was read."""


class TrainingDiverged(IconsimError, RuntimeError):
    """Training produced a non-finite loss."""
