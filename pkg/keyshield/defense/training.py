"""Pre-training of the plain classifier and key fine-tuning of pairs."""
from __future__ import annotations

import copy
import logging
from pathlib import Path
from typing import Dict, Optional, Union

import torch
from torch import nn

from ..autodiff import kernels
from ..autodiff.tape import GradTape, backward
from ..errors import DataError, DimensionError, KeyShieldError
from ..evaluation.container import DatasetContainer
from ..model.config import ModelConfig
from ..model.network import (
    EmbeddingHeadPair,
    IsotropicNet,
    backbone_checksum,
    init_model,
    running_statistics,
)
from ..model.store import save_model
from ..transform.keys import SecretKey
from ..transform.prng import SplitMix64
from ..transform.shuffle import encrypt_dataset
from .config import TrainConfig
from .schemas import TrainingRecord

_LOGGER = logging.getLogger(__name__)

TRAINING_RECORD_FILE = "training.json"


@torch.no_grad()
def _accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, batch_size: int) -> float:
    if images.shape[0] == 0:
        return 0.0
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        logits = model(images[start : start + batch_size])
        correct += int((kernels.predicted_labels(logits) == labels[start : start + batch_size]).sum())
    return correct / images.shape[0]


def train_parameters(
    model: IsotropicNet,
    parameters: Dict[str, nn.Parameter],
    dataset: DatasetContainer,
    config: TrainConfig,
    phase: str,
) -> TrainingRecord:
    """Minibatch SGD on ``parameters`` only; other tensors receive no updates."""

    images, labels = dataset.tensors()
    count = images.shape[0]
    generator = SplitMix64(config.seed).split(phase).torch_generator()
    optimizer = torch.optim.SGD(
        list(parameters.values()),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )

    final_loss: Optional[float] = None
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(count, generator=generator)
        total = 0.0
        for start in range(0, count, config.batch_size):
            index = order[start : start + config.batch_size]
            with GradTape() as tape:
                logits = model(images[index])
                loss = kernels.softmax_cross_entropy(logits, labels[index])
            grads = backward(tape, loss, parameters)
            for name, parameter in parameters.items():
                parameter.grad = grads[name]
            optimizer.step()
            total += float(loss) * index.numel()
        final_loss = total / count
        _LOGGER.info("%s epoch %d/%d loss %.4f", phase, epoch + 1, config.epochs, final_loss)
    model.eval()

    accuracy = _accuracy(model, images, labels, config.batch_size)
    _LOGGER.info("%s train accuracy %.3f", phase, accuracy)
    return TrainingRecord(
        phase=phase,
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        examples=count,
        final_loss=final_loss,
        train_accuracy=accuracy,
        key_id=model.key_id,
    )


def pretrain_backbone(
    dataset: DatasetContainer,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> IsotropicNet:
    """Train the plain classifier end to end on unencrypted images."""

    if dataset.count == 0:
        raise DataError("Cannot pre-train on an empty dataset")
    model_config = model_config or ModelConfig()
    dataset.check_labels(model_config.num_classes)

    init_seed = SplitMix64(config.seed).split("init").next_u64()
    model = init_model(model_config, init_seed)
    model.backbone.unfreeze()
    record = train_parameters(model, dict(model.named_parameters()), dataset, config, phase="pretrain")

    if checkpoint_dir is not None:
        target = save_model(checkpoint_dir, model)
        (target / TRAINING_RECORD_FILE).write_text(record.model_dump_json(indent=2), encoding="utf-8")
    return model


def finetune_pair(
    backbone: IsotropicNet,
    key: SecretKey,
    dataset: DatasetContainer,
    config: TrainConfig,
    block_size: Optional[int] = None,
    key_id: Optional[int] = None,
    allow_misaligned: bool = False,
    workers: Optional[int] = None,
) -> EmbeddingHeadPair:
    """Fine-tune a copy of the pre-trained pair on images encrypted with ``key``.

    The backbone stays frozen and bit-identical; the returned pair starts from
    the pre-trained embedding and head.
    """

    if dataset.count == 0:
        raise DataError("Cannot fine-tune on an empty dataset")
    patch_size = backbone.config.patch_size
    block_size = block_size or patch_size
    if block_size != patch_size:
        if not allow_misaligned:
            raise DimensionError(
                f"block size {block_size} differs from patch size {patch_size}; pass allow_misaligned to override"
            )
        _LOGGER.warning("Block size %d differs from patch size %d", block_size, patch_size)

    shared = backbone.backbone
    before = backbone_checksum(shared)
    encrypted = encrypt_dataset(dataset, key, block_size, workers=workers)

    pair = backbone.pair.clone(key_id=key_id)
    if config.refresh_backbone_stats:
        working = copy.deepcopy(shared).freeze(refresh_stats=True)
    else:
        working = shared.freeze()
    model = IsotropicNet(backbone.config, pair.embedding, working, pair.head, key_id=key_id)

    phase = f"finetune[{key_id if key_id is not None else key.seed}]"
    train_parameters(model, model.pair_parameters(), encrypted, config, phase=phase)
    if config.refresh_backbone_stats:
        pair.backbone_stats = running_statistics(working)

    if backbone_checksum(shared) != before:
        raise KeyShieldError("Backbone changed during fine-tuning")
    return pair


__all__ = ["TRAINING_RECORD_FILE", "finetune_pair", "pretrain_backbone", "train_parameters"]
