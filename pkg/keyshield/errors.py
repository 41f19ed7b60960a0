"""Exception hierarchy shared by every keyshield package."""
from __future__ import annotations

from typing import Sequence, Tuple


class KeyShieldError(RuntimeError):
    """Base exception raised by keyshield."""


class DimensionError(KeyShieldError, ValueError):
    """Image dimensions are incompatible with the block size."""


class ShapeError(KeyShieldError, ValueError):
    """A kernel received tensors whose shapes violate its rule."""

    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = "") -> None:
        self.op = op
        self.shapes = [tuple(shape) for shape in shapes]
        message = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class TapeError(KeyShieldError):
    """Backward was requested for a loss the tape did not record."""


class NumericalError(KeyShieldError, FloatingPointError):
    """A kernel produced NaN or Inf while debug checks were enabled."""


class ConfigError(KeyShieldError, ValueError):
    """A configuration object violates its invariants."""


class DataError(KeyShieldError, ValueError):
    """A dataset is empty or unusable for the requested stage."""


class FormatError(KeyShieldError):
    """A binary container or checkpoint is malformed."""


class LabelError(KeyShieldError):
    """Label file disagrees with its image container."""


class EmptySelection(KeyShieldError):
    """No sample satisfied the selection filter."""


class DuplicateKeyError(KeyShieldError, KeyError):
    """The same secret key appears twice in a key pool."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class PoolKeyCollision(KeyShieldError, KeyError):
    """An attacker key coincides with a defender pool key."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class KeyIndexError(KeyShieldError, IndexError):
    """A forced key index lies outside 1..N."""


class StageError(KeyShieldError):
    """An experiment stage aborted."""

    def __init__(self, stage: str, cause: BaseException, report: object = None) -> None:
        self.stage = stage
        self.cause = cause
        # Partial report flushed before the abort, if any.
        self.report = report
        super().__init__(f"stage '{stage}' failed: {cause}")


__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "DuplicateKeyError",
    "EmptySelection",
    "FormatError",
    "KeyIndexError",
    "KeyShieldError",
    "LabelError",
    "NumericalError",
    "PoolKeyCollision",
    "ShapeError",
    "StageError",
    "TapeError",
]
