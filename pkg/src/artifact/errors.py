"""Exception hierarchy shared by every module in the package."""


class ArtifactError(Exception):
    """Base class for all package errors."""


class InvalidInput(ArtifactError, ValueError):
    pass


class EmptyRegion(ArtifactError, ValueError):
    pass


class NoAdjacentPairs(ArtifactError, ValueError):
    pass


class InsufficientCalibration(ArtifactError, ValueError):
    pass


class IncompleteLibrary(ArtifactError, KeyError):
    def __init__(self, channel):
        super().__init__(channel)
        self.channel = channel

    def __str__(self):
        return f"no candidates or support for channel {self.channel}"


class DegenerateFeature(ArtifactError, ValueError):
    pass


class TraceMismatch(ArtifactError, RuntimeError):
    pass


class TrainingDiverged(ArtifactError, FloatingPointError):
    def __init__(self, batch_index: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at batch {batch_index}")
        self.batch_index = batch_index


class NoHistory(ArtifactError, ValueError):
    pass


class DegenerateReference(ArtifactError, ValueError):
    pass


class UndefinedGeodesic(ArtifactError, ValueError):
    pass


class UndefinedMetric(ArtifactError, ValueError):
    pass


class ChannelError(ArtifactError):
    """Wraps an indicator failure with the (region, dimension) it came from."""

    def __init__(self, channel, cause: Exception):
        super().__init__(f"{channel}: {cause}")
        self.channel = channel
        self.cause = cause
