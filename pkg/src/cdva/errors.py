"""Exception hierarchy.

Each family carries the process exit code the CLI reports for it.
"""


class CdvaError(Exception):
    exit_code = 1


class UsageError(CdvaError):
    exit_code = 2


# -- media / input (3) --

class MediaError(CdvaError):
    exit_code = 3


class MissingFrame(MediaError):
    pass


class DimensionMismatch(MediaError):
    pass


class ImageTooSmall(MediaError):
    pass


class CorruptTensor(MediaError):
    pass


class ShapeMismatch(MediaError):
    pass


# -- models (4) --

class ModelError(CdvaError):
    exit_code = 4


class InsufficientData(ModelError):
    pass


class ModelMismatch(ModelError):
    pass


class FormMismatch(ModelError):
    pass


class DegenerateData(ModelError):
    pass


class NotPrunable(ModelError):
    pass


class EmptyRoi(ModelError):
    pass


# -- codec (5) --

class CodecError(CdvaError):
    exit_code = 5


class BudgetExceeded(CodecError):
    pass


class BudgetTooSmall(CodecError):
    pass


class OutOfBounds(CodecError):
    pass


class CorruptStream(CodecError):
    def __init__(self, message, last_good_timestamp=None):
        super().__init__(message)
        self.last_good_timestamp = last_good_timestamp


# -- config (6) --

class InvalidConfig(CdvaError):
    exit_code = 6


# -- analysis / evaluation (7) --

class AnalysisError(CdvaError):
    exit_code = 7


class DuplicateVideoId(AnalysisError):
    pass


class MalformedInterval(AnalysisError):
    pass


class EmptyScores(AnalysisError):
    pass


class NoRelevants(AnalysisError):
    pass


# -- warnings --

class EmptyFrameWarning(UserWarning):
    """A frame produced no local descriptors; its global descriptor is unusable."""


class DegenerateDataWarning(UserWarning):
    pass


class ThresholdOrderWarning(UserWarning):
    pass
