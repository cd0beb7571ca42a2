"""Exception hierarchy shared across the package."""


class DistAnnError(Exception):
    pass


class DimensionMismatchError(DistAnnError, ValueError):
    pass


class EmptyDatasetError(DistAnnError, ValueError):
    pass


class FormatError(DistAnnError, ValueError):
    """Malformed on-disk or on-wire data."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class InvalidDimensionError(FormatError):
    pass


class WrongShardError(DistAnnError):
    """A key was routed to a shard that does not own it."""


class SearchFailedError(DistAnnError):
    """Every shard call failed; ``partial`` holds whatever was gathered."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial if partial is not None else []
