"""Exception types raised across the toolkit.

Every error derives from :class:`DespeckleError` (itself a ``ValueError``) so
callers can catch the whole family at once.
"""


class DespeckleError(ValueError):
    pass


# image I/O and preparation
class ImageFormatError(DespeckleError):
    pass


class MalformedHeader(ImageFormatError):
    pass


class UnsupportedFormat(ImageFormatError):
    pass


class TruncatedData(ImageFormatError):
    pass


class IoFailure(DespeckleError, OSError):
    pass


class SizeTooSmall(DespeckleError):
    pass


class PatchTooLarge(DespeckleError):
    pass


class InvalidFloor(DespeckleError):
    pass


# noise model
class InvalidRange(DespeckleError):
    pass


class TooFewSteps(DespeckleError):
    pass


class NegativeAlpha(DespeckleError):
    pass


class IndexOutOfRange(DespeckleError, IndexError):
    pass


# network
class ShapeMismatch(DespeckleError):
    pass


class TauLengthMismatch(DespeckleError):
    pass


class NetTooLarge(DespeckleError):
    pass


# training / inference
class EmptyDataset(DespeckleError):
    pass


class ImageTooSmall(DespeckleError):
    pass


class CheckpointMismatch(DespeckleError):
    pass


# baselines
class UnstableStep(DespeckleError):
    pass


class NonPositivePixels(DespeckleError):
    pass


# harness
class ConfigError(DespeckleError):
    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"invalid config key {key!r}")


class EmptyInputDir(DespeckleError):
    pass


class MissingExternalCsv(DespeckleError, FileNotFoundError):
    pass
