"""Exception hierarchy shared by all pipeline stages."""


class PickError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PickError, ValueError):
    pass


class DetectionParseError(PickError, ValueError):
    pass


class DecompositionError(PickError):
    pass


class IngestError(PickError):
    pass


class EmbeddingError(PickError):
    pass


class TrainingError(PickError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class SamplingError(PickError):
    pass


class PolicyUpdateError(PickError):
    pass


class TemplateError(PickError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ParseError(PickError, ValueError):
    """Model output could not be parsed into the expected shape."""

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class TransportError(PickError):
    """The request never produced a usable HTTP response."""


class BackendError(PickError):
    """All attempts for a backend query were exhausted."""

    def __init__(self, message: str, raw_text: str | None = None, kind: str = "parse", slot: int | None = None):
        super().__init__(message)
        self.raw_text = raw_text
        self.kind = kind
        self.slot = slot


class AggregationError(PickError):
    pass


class MetricsError(PickError):
    pass


class ManifestError(PickError):
    pass
