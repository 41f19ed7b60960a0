"""Pydantic documents persisted by the defense pipeline."""
from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class TrainingRecord(BaseModel):
    phase: str
    epochs: int
    learning_rate: float
    examples: int
    final_loss: Optional[float] = Field(default=None)
    train_accuracy: float = Field(ge=0.0, le=1.0)
    key_id: Optional[int] = Field(default=None)


class DefenseManifest(BaseModel):
    """Everything needed to rebuild a :class:`DefendedClassifier`.

    Paths are stored relative to the manifest's directory when possible.
    """

    block_size: int = Field(ge=1)
    n: int = Field(ge=1)
    key_file: str
    pair_paths: List[str]
    backbone_path: str
    plain_pair_path: str
    model_config_path: str
    sampler_seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_pool(self) -> "DefenseManifest":
        if len(self.pair_paths) != self.n:
            raise ValueError(f"manifest lists {len(self.pair_paths)} pairs for n={self.n}")
        return self


__all__ = ["DefenseManifest", "TrainingRecord"]
