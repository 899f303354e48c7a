"""Exception hierarchy shared by all pipeline stages."""


class StitchError(Exception):
    """Base class for every error raised by this package."""


class DataError(StitchError, ValueError):
    """Input data is malformed or inconsistent (CLI exit code 2)."""


class CorpusError(DataError):
    pass


class EmptyClip(DataError):
    pass


class ZeroVector(DataError):
    pass


class EmptyInstance(DataError):
    pass


class NoCandidates(DataError):
    pass


class CannotViolate(DataError):
    """A negative sampler found no way to corrupt the given sample."""


class DistractorShortfall(DataError):
    pass


class TrainingDiverged(StitchError, FloatingPointError):
    pass


class ExternalServiceError(StitchError):
    """Failure of an external dependency (CLI exit code 3)."""


class LlmUnavailable(ExternalServiceError):
    pass


class LlmFormatError(StitchError, ValueError):
    def __init__(self, message, raw=""):
        super().__init__(message)
        self.raw = raw
