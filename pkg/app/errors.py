from typing import Optional


class SleepPoseError(Exception):
    """Base class for every error raised by the posture pipeline."""


class InvalidInputError(SleepPoseError):
    """Input violates a documented precondition."""


class BvhParseError(InvalidInputError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class StreamError(InvalidInputError):
    """Timestamps out of order, empty streams or empty overlap windows."""


class TrainingError(InvalidInputError):
    """Training data cannot produce a model (single class, missing class, NaN)."""


class ArtifactNotFoundError(SleepPoseError):
    """A stored model, dataset or report does not exist."""
