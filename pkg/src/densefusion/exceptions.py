"""Exception types raised across the package."""


class DenseFusionError(Exception):
    pass


class NonPositiveDepth(DenseFusionError, ValueError):
    pass


class ShapeMismatch(DenseFusionError, ValueError):
    pass


class NonScalarLoss(DenseFusionError, ValueError):
    pass


class DisconnectedGraph(DenseFusionError, RuntimeError):
    pass


class UnknownShape(DenseFusionError, ValueError):
    pass


class DegenerateSize(DenseFusionError, ValueError):
    pass


class ObjectBehindCamera(DenseFusionError, ValueError):
    pass


class MalformedFile(DenseFusionError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyCloud(DenseFusionError, ValueError):
    pass


class IndexOutOfBounds(DenseFusionError, IndexError):
    pass


class EmptyPredictionList(DenseFusionError, ValueError):
    pass


class EmptyMask(DenseFusionError, ValueError):
    pass


class NoValidDepth(DenseFusionError, ValueError):
    pass


class LengthMismatch(DenseFusionError, ValueError):
    pass


class NonPositiveConfidence(DenseFusionError, ValueError):
    pass


class MissingCheckpoint(DenseFusionError, FileNotFoundError):
    pass


class DegenerateConfiguration(DenseFusionError, ValueError):
    pass


class EmptyList(DenseFusionError, ValueError):
    pass


class IoError(DenseFusionError, OSError):
    """A required file or directory is missing or unreadable; ``path`` names it."""

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path
