"""Exception hierarchy for coloc-retrieval."""

from pathlib import Path
from typing import Optional, Sequence, Union


class ColocError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ColocError, ValueError):
    """Raised when tensor shapes are incompatible for an operation."""

    def __init__(
        self,
        op: str,
        left: Sequence[int],
        right: Optional[Sequence[int]] = None,
        detail: str = "",
    ):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right) if right is not None else None
        shapes = f"{list(self.left)}"
        if self.right is not None:
            shapes += f" and {list(self.right)}"
        message = f"{op}: incompatible shapes {shapes}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class RankError(ShapeError):
    """Raised when an operation receives a tensor of the wrong rank."""


class DomainError(ColocError, ValueError):
    """Raised when an input lies outside an operation's domain."""


class EmptyCaptionError(ColocError, ValueError):
    """Raised when a caption or token mask has no valid token."""


class TapeError(ColocError, RuntimeError):
    """Raised when a tensor is not recorded on the expected tape."""


class NumericalError(ColocError, ArithmeticError):
    """Raised in debug mode when a forward value is NaN or infinite."""


class ConfigurationError(ColocError, ValueError):
    """Raised for invalid settings, schedules or key/value configuration."""


class SizeError(ColocError, ValueError):
    """Raised when a target resolution is smaller than its source grid."""


class VocabularyError(ColocError, ValueError):
    """Raised when a token id falls outside the vocabulary."""


class SpanError(ColocError, ValueError):
    """Raised for empty, out-of-range or overlapping phrase spans."""


class CaptionLengthError(ColocError, ValueError):
    """Raised when a caption is longer than the padding limit."""


class TokenIndexError(ColocError, IndexError):
    """Raised when a token index lies outside the valid tokens."""


class BatchSizeError(ColocError, ValueError):
    """Raised when a loss receives fewer than two pairs."""


class CorpusSizeError(ColocError, ValueError):
    """Raised when a corpus holds fewer images than a batch needs."""


class StateCorruptionError(ColocError, RuntimeError):
    """Raised when parameters, velocities and gradients disagree."""


class TrainingDivergedError(ColocError, RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(
            f"Non-finite loss {loss!r} at epoch {epoch}, batch {batch}"
        )


class FormatError(ColocError, ValueError):
    """Raised for bad magic bytes, versions or schema versions."""


class CorruptionError(ColocError, ValueError):
    """Raised when a stored file is truncated or internally inconsistent."""

    def __init__(self, path: Union[str, Path], detail: str):
        self.path = Path(path)
        super().__init__(f"Corrupted file {self.path}: {detail}")


class AnnotationError(ColocError, ValueError):
    """Raised for missing or inconsistent ground-truth annotations."""


class GenerationError(ColocError, RuntimeError):
    """Raised when a scene cannot be generated within the retry budget."""
