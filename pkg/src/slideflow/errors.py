"""Exception hierarchy shared across the package."""


class SlideflowError(Exception):
    """Base class for every error raised by slideflow."""


class ContractError(SlideflowError, ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Array shapes do not line up."""


class NumericError(SlideflowError, ArithmeticError):
    """A computation produced NaN/Inf or otherwise lost numerical meaning."""


class DataError(SlideflowError):
    """Input data on disk is malformed or inconsistent."""


class SlideFormatError(DataError):
    """Base class for SLB1 / checkpoint decoding failures."""


class BadMagicError(SlideFormatError):
    pass


class TruncatedFileError(SlideFormatError):
    pass


class ChecksumError(SlideFormatError):
    pass


class VersionError(SlideFormatError):
    pass


class InvariantError(SlideFormatError, ContractError):
    """Decoded content violates a data invariant (e.g. zero spots)."""
