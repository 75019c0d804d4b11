"""Exception hierarchy shared by all mvcorr modules."""


class MVCorrError(Exception):
    """Base class for every error raised by this package."""


class FormatError(MVCorrError, ValueError):
    """A file does not follow the expected binary/text layout."""


class TruncationError(FormatError):
    """Declared dimensions disagree with the payload length."""


class DataError(MVCorrError, ValueError):
    """Array contents violate an invariant (NaN/Inf, bad values)."""


class ShapeError(MVCorrError, ValueError):
    """Array shapes or dimensions do not line up."""


class CameraError(MVCorrError, ValueError):
    """Camera parameters are not a valid pinhole camera."""


class InvalidDepthError(MVCorrError, ValueError):
    pass


class BehindCameraError(MVCorrError, ValueError):
    pass


class SelectionError(MVCorrError, ValueError):
    """Reference selection could not be resolved."""


class PipelineError(MVCorrError, RuntimeError):
    pass


class SpecError(MVCorrError, ValueError):
    """Synthetic scene specification cannot be satisfied."""


class ScoreError(MVCorrError, ValueError):
    """Consistency score is undefined for the given inputs."""
