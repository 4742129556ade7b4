"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage errors exit 2 (argparse),
:class:`DataError` and subclasses exit 3, :class:`DivergenceError` exits 4.
"""


class RsaMaskError(Exception):
    """Base class for every error raised by this package."""


class DataError(RsaMaskError):
    """Invalid, inconsistent, or degenerate input data."""


class FormatError(DataError):
    """Malformed file container."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File declares an unsupported format version."""


class TruncationError(FormatError):
    """File ends before the declared content, or lengths disagree."""


class PayloadError(FormatError):
    """Payload contains non-finite values."""


class DuplicateIdError(DataError):
    """Image identifiers are not unique."""


class ValidationError(DataError):
    """A structural invariant is violated (asymmetry, nonzero diagonal, ...)."""


class ShapeError(DataError):
    """Array shapes are inconsistent with the declared stage layout."""


class DegenerateDataError(DataError):
    """Too little data to define the requested quantity."""


class ZeroVarianceError(DataError):
    """A correlation was requested for a constant vector."""


class DivergenceError(RsaMaskError):
    """Training loss became non-finite."""
