"""Exception types shared across the package."""


class SingularityError(ValueError):
    """A log/division argument hit zero where the result would be unbounded.

    Raised when clamping the argument would change the computed value by more
    than the documented tolerance, so silently clamping would be a lie.
    """


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    Attributes:
        step: index of the training step at which divergence was detected.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class UndefinedAngleError(ValueError):
    """Angle comparison requested against a zero reference gradient."""


class CacheError(Exception):
    """Base class for cache codec failures."""


class CacheCorruptError(CacheError):
    """The byte stream is not a well-formed cache file.

    Attributes:
        offset: byte offset at which the problem was detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CacheVersionError(CacheError):
    """The file declares a version or scheme this codec does not support."""
