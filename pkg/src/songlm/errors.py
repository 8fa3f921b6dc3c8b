"""Exception hierarchy shared by all songlm modules."""


class SongLMError(Exception):
    """Base class for every error raised by this package."""


class MalformedMarker(SongLMError, ValueError):
    pass


class LengthMismatch(SongLMError, ValueError):
    pass


class ShapeMismatch(SongLMError, ValueError):
    pass


class DimMismatch(SongLMError, ValueError):
    pass


class IndexOutOfRange(SongLMError, IndexError):
    pass


class DegenerateFrame(SongLMError, ValueError):
    pass


class EmptyCorpus(SongLMError, ValueError):
    pass


class TooLong(SongLMError, ValueError):
    pass


class ConfigMismatch(SongLMError, ValueError):
    pass


class EmptyBatch(SongLMError, ValueError):
    pass


class GroupTooSmall(SongLMError, ValueError):
    pass


class BatchMismatch(SongLMError, ValueError):
    pass


class CapacityExceeded(SongLMError, RuntimeError):
    pass


class SessionExhausted(SongLMError, RuntimeError):
    pass


class BadCheckpoint(SongLMError, ValueError):
    """Raised when a binary file has the wrong magic, version or layout."""


class MissingPrerequisite(SongLMError, ValueError):
    pass
