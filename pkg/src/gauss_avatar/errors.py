class GaussAvatarError(Exception):
    """Base class for errors raised by this package."""


class FormatError(GaussAvatarError, ValueError):
    """An input file is malformed or does not match its declared layout."""


class ValidationError(GaussAvatarError, ValueError):
    """Inputs are well-formed but violate a numeric or structural invariant."""
