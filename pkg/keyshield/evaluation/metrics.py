"""Accuracy over labeled image sets."""
from __future__ import annotations

import logging
from typing import Callable, Tuple, Union

import torch

from ..errors import EmptySelection
from .container import DatasetContainer

_LOGGER = logging.getLogger(__name__)

Predict = Callable[[torch.Tensor], torch.Tensor]
Labeled = Union[DatasetContainer, Tuple[torch.Tensor, torch.Tensor]]


def _as_tensors(dataset: Labeled) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(dataset, DatasetContainer):
        return dataset.tensors()
    images, labels = dataset
    return images, labels


@torch.no_grad()
def correct_mask(predict: Predict, dataset: Labeled, batch_size: int = 256) -> torch.Tensor:
    """Boolean ``(N,)`` of images ``predict`` labels correctly, in order."""

    images, labels = _as_tensors(dataset)
    if images.shape[0] == 0:
        raise EmptySelection("accuracy of an empty dataset is undefined")
    parts = []
    for start in range(0, images.shape[0], batch_size):
        predicted = predict(images[start : start + batch_size])
        parts.append(predicted.reshape(-1).long() == labels[start : start + batch_size].long())
    return torch.cat(parts)


def accuracy(predict: Predict, dataset: Labeled, batch_size: int = 256) -> float:
    """Fraction correct; ``predict`` maps a ``[0, 1]`` batch to labels."""

    mask = correct_mask(predict, dataset, batch_size)
    value = float(mask.double().mean())
    _LOGGER.debug("accuracy %.4f over %d images", value, mask.numel())
    return value


__all__ = ["Labeled", "Predict", "accuracy", "correct_mask"]
