"""Exception types shared across the package."""


class LandgenError(Exception):
    """Base class for all landgen errors."""


class FormatError(LandgenError):
    """A binary or JSON artifact failed to parse."""


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ClassIndexOutOfRangeError(FormatError):
    pass


class PaletteMismatchError(LandgenError):
    """Raster class count does not match the palette."""


class InfeasibleWindowError(LandgenError):
    """Window extraction could not satisfy the rejection rule."""


class NumericalError(LandgenError):
    """A numerical routine failed (divergent sampler, singular system)."""
