"""Exception types shared across the package."""


class SplatmarkError(Exception):
    """Base class for all package errors."""


class CountMismatch(SplatmarkError):
    """Gaussian count does not match the requested grid dimensions."""


class ShapeMismatch(SplatmarkError):
    """Operands have incompatible shapes."""


class DimMismatch(SplatmarkError):
    """Stored dimensions disagree with expectations."""


class ParseError(SplatmarkError):
    """Malformed file header or fields."""


class ActivationOverflow(SplatmarkError):
    """Parameter activation produced a non-finite value."""


class BadMagic(SplatmarkError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(SplatmarkError):
    """File payload is shorter than the header promises."""


class EmptyCameraSet(SplatmarkError):
    """An operation requiring cameras received none."""


class MessageLengthMismatch(SplatmarkError):
    """Message bit length does not match the model's lookup table."""


class BadSpec(SplatmarkError):
    """Attack specification has an unknown kind or out-of-range parameter."""


class NonFiniteLoss(SplatmarkError):
    """Training produced a non-finite loss value."""
