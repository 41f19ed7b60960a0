"""Isotropic classifier with swappable patch embedding and head."""

from .config import ModelConfig
from .network import (
    ClassifierHead,
    EmbeddingHeadPair,
    IsotropicNet,
    MixerBackbone,
    PatchEmbedding,
    attach_pair,
    backbone_checksum,
    forward,
    init_model,
    swap_pair,
)
from .store import load_model, load_pair, save_model, save_pair

__all__ = [
    "ClassifierHead",
    "EmbeddingHeadPair",
    "IsotropicNet",
    "MixerBackbone",
    "ModelConfig",
    "PatchEmbedding",
    "attach_pair",
    "backbone_checksum",
    "forward",
    "init_model",
    "load_model",
    "load_pair",
    "save_model",
    "save_pair",
    "swap_pair",
]
