"""Adversarial sets on disk: a dataset container plus an ``adv.json`` sidecar."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
from pydantic import ValidationError

from ..errors import ConfigError, FormatError
from ..evaluation.container import DatasetContainer, load_dataset, save_dataset
from ..evaluation.schemas import AdvSetMetadata
from .config import AdvExample

_LOGGER = logging.getLogger(__name__)

SIDECAR_FILE = "adv.json"


def quantize(adv: AdvExample) -> np.ndarray:
    """uint8 pixels with every coordinate's offset truncated toward the original.

    Truncation never grows a coordinate's offset, so both norms stay in budget.
    """

    original = torch.round(adv.original.detach().double() * 255)
    offset = torch.trunc((adv.perturbed.detach().double() * 255 - original).clamp(-255, 255))
    pixels = (original + offset).clamp(0, 255)
    return pixels.to(torch.uint8).numpy()


def save_adv_set(directory: Union[str, Path], adv: AdvExample, metadata: AdvSetMetadata) -> Path:
    target = Path(directory)
    labels = adv.true_label.detach().cpu().numpy().astype(np.int64)
    save_dataset(target, DatasetContainer(quantize(adv), labels))
    with (target / SIDECAR_FILE).open("w", encoding="utf-8") as handle:
        json.dump(metadata.model_dump(mode="json"), handle, indent=2)
        handle.write("\n")
    _LOGGER.info("Saved %d adversarial images (%s) to %s", adv.count, metadata.method, target)
    return target


def load_adv_set(directory: Union[str, Path]) -> Tuple[DatasetContainer, AdvSetMetadata]:
    source = Path(directory)
    dataset = load_dataset(source)
    try:
        payload = json.loads((source / SIDECAR_FILE).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"Cannot read {source / SIDECAR_FILE}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source / SIDECAR_FILE} is not valid JSON: {exc}") from exc
    try:
        metadata = AdvSetMetadata.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"{source / SIDECAR_FILE} is invalid: {exc}") from exc
    if metadata.count != dataset.count:
        raise FormatError(f"sidecar lists {metadata.count} images, container holds {dataset.count}")
    return dataset, metadata


__all__ = ["SIDECAR_FILE", "load_adv_set", "quantize", "save_adv_set"]
