"""File layout for model checkpoints.

A model directory holds ``config`` (``key = value`` lines), ``backbone.bin`` and
one ``pair_<key_id>.bin`` per embedding/head pair; the pre-trained pair is
``pair_plain.bin``.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Union

from ..autodiff.checkpoint import read_checkpoint, write_checkpoint
from ..errors import FormatError
from .config import ModelConfig
from .network import EmbeddingHeadPair, IsotropicNet, MixerBackbone

_LOGGER = logging.getLogger(__name__)

CONFIG_FILE = "config"
BACKBONE_FILE = "backbone.bin"
PLAIN_PAIR_FILE = "pair_plain.bin"


def pair_filename(key_id: Optional[int]) -> str:
    return PLAIN_PAIR_FILE if key_id is None else f"pair_{key_id}.bin"


def save_backbone(path: Union[str, Path], backbone: MixerBackbone) -> Path:
    return write_checkpoint(path, backbone.state_dict())


def load_backbone(path: Union[str, Path], config: ModelConfig) -> MixerBackbone:
    backbone = MixerBackbone(config.hidden_dim, config.depth, config.kernel_size)
    tensors = read_checkpoint(path)
    try:
        backbone.load_state_dict(tensors)
    except RuntimeError as exc:
        raise FormatError(f"{path}: backbone does not match config: {exc}") from exc
    return backbone


def save_pair(path: Union[str, Path], pair: EmbeddingHeadPair) -> Path:
    return write_checkpoint(path, pair.tensors())


def load_pair(path: Union[str, Path], config: ModelConfig, key_id: Optional[int] = None) -> EmbeddingHeadPair:
    return EmbeddingHeadPair.from_tensors(config, read_checkpoint(path), key_id=key_id)


def save_model(directory: Union[str, Path], model: IsotropicNet) -> Path:
    """Write config, backbone and the model's active pair."""

    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    model.config.save(target / CONFIG_FILE)
    save_backbone(target / BACKBONE_FILE, model.backbone)
    save_pair(target / pair_filename(model.key_id), model.pair)
    _LOGGER.info("Saved model to %s", target)
    return target


def load_model(directory: Union[str, Path]) -> IsotropicNet:
    """Load the pre-trained classifier (backbone plus plain pair), in eval mode."""

    source = Path(directory)
    config = ModelConfig.load(source / CONFIG_FILE)
    backbone = load_backbone(source / BACKBONE_FILE, config)
    pair = load_pair(source / PLAIN_PAIR_FILE, config)
    model = IsotropicNet(config, pair.embedding, backbone, pair.head)
    return model.eval()


__all__ = [
    "BACKBONE_FILE",
    "CONFIG_FILE",
    "PLAIN_PAIR_FILE",
    "load_backbone",
    "load_model",
    "load_pair",
    "pair_filename",
    "save_backbone",
    "save_model",
    "save_pair",
]
