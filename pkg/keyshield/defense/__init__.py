"""Pre-training, key fine-tuning and randomized key-pool inference."""

from .classifier import (
    DefendedClassifier,
    KeySampler,
    PoolEntry,
    build_defense,
    defended_predict,
    defended_predict_batch,
    predict_with_key,
)
from .config import TrainConfig
from .manifest_store import load_defense, load_plain_model, save_defense
from .schemas import DefenseManifest, TrainingRecord
from .training import finetune_pair, pretrain_backbone

__all__ = [
    "DefendedClassifier",
    "DefenseManifest",
    "KeySampler",
    "PoolEntry",
    "TrainConfig",
    "TrainingRecord",
    "build_defense",
    "defended_predict",
    "defended_predict_batch",
    "finetune_pair",
    "load_defense",
    "load_plain_model",
    "predict_with_key",
    "pretrain_backbone",
    "save_defense",
]
