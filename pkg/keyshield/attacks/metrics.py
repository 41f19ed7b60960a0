"""Selection of correctly classified images and attack success rates."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from ..autodiff import kernels
from ..defense.classifier import DefendedClassifier, KeySampler, defended_predict_batch
from ..errors import ConfigError, EmptySelection
from ..evaluation.container import DatasetContainer
from ..evaluation.metrics import Labeled, accuracy
from ..transform.prng import SplitMix64
from .config import AdvExample

_LOGGER = logging.getLogger(__name__)

EVAL_STREAM = "eval"


@torch.no_grad()
def forced_key_predictions(d: DefendedClassifier, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Labels under every key: ``(N, pool size)``, column ``i`` is key ``i + 1``."""

    columns = []
    for index in range(1, d.size + 1):
        parts = [
            kernels.predicted_labels(d.keyed_logits(images[start : start + batch_size], index))
            for start in range(0, images.shape[0], batch_size)
        ]
        columns.append(torch.cat(parts) if parts else torch.empty(0, dtype=torch.long))
    return torch.stack(columns, dim=1)


def defended_accuracy(
    d: DefendedClassifier, dataset: Labeled, stream: str = EVAL_STREAM, batch_size: int = 256
) -> float:
    """Randomized-inference accuracy with a fresh sampler on ``stream``.

    Two passes over equally ordered sets draw the same key for each position,
    so clean and perturbed copies of one image meet the same key.
    """

    sampler = d.sampler(stream)
    return accuracy(lambda batch: defended_predict_batch(d, batch, sampler)[0], dataset, batch_size)


@dataclass(frozen=True)
class Selection:
    """Images correct under every pool key, sampled without replacement."""

    indices: Tuple[int, ...]
    candidates: int
    requested: int
    seed: int

    @property
    def count(self) -> int:
        return len(self.indices)

    def apply(self, dataset: DatasetContainer) -> DatasetContainer:
        return dataset.subset(self.indices)


def select_correct(d: DefendedClassifier, dataset: DatasetContainer, count: int, seed: int = 0) -> Selection:
    if count < 1:
        raise ConfigError("selection size must be >= 1")
    images, labels = dataset.tensors()
    predictions = forced_key_predictions(d, images)
    correct = (predictions == labels.unsqueeze(1)).all(dim=1)
    candidates = torch.nonzero(correct).flatten().tolist()
    if not candidates:
        raise EmptySelection("no image is classified correctly under every key")
    order = SplitMix64(seed).split("selection").sample(len(candidates), min(count, len(candidates)))
    chosen = tuple(sorted(candidates[position] for position in order))
    if len(chosen) < count:
        _LOGGER.warning("Only %d of %d requested images qualify for the selection", len(chosen), count)
    return Selection(chosen, len(candidates), count, seed)


@dataclass(frozen=True)
class AttackSuccess:
    """Expected rate over the key pool plus one randomized draw per image."""

    expected: float
    single_draw: float
    examples: int


def _succeeded(predicted: torch.Tensor, adv: AdvExample) -> torch.Tensor:
    if adv.config.targeted is not None:
        return predicted == adv.config.targeted
    labels = adv.true_label.long()
    if predicted.dim() == 2:
        labels = labels.unsqueeze(1)
    return predicted != labels


def attack_success_rate(
    d: DefendedClassifier,
    adv_set: AdvExample,
    selection: Selection,
    sampler: Optional[KeySampler] = None,
) -> AttackSuccess:
    """Fraction of selected images the attack flips.

    ``expected`` averages, per image, the success over all forced keys;
    ``single_draw`` classifies each image once under a sampled key.
    """

    if selection.count == 0:
        raise EmptySelection("empty selection")
    if adv_set.count != selection.count:
        raise ConfigError(f"{adv_set.count} adversarial images for a selection of {selection.count}")
    perturbed = adv_set.perturbed.detach()
    forced = forced_key_predictions(d, perturbed)
    per_image = _succeeded(forced, adv_set).double().mean(dim=1)
    sampled, _ = defended_predict_batch(d, perturbed, sampler or d.sampler("asr"))
    single = _succeeded(sampled, adv_set).double().mean()
    result = AttackSuccess(float(per_image.mean()), float(single), adv_set.count)
    _LOGGER.info("ASR expected %.3f single-draw %.3f over %d images", result.expected, result.single_draw, result.examples)
    return result


__all__ = [
    "AttackSuccess",
    "EVAL_STREAM",
    "Selection",
    "attack_success_rate",
    "defended_accuracy",
    "forced_key_predictions",
    "select_correct",
]
