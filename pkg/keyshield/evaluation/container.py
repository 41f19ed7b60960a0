"""``KSIMG1`` labeled image container.

A dataset directory holds ``images.bin`` (magic ``KSIMG1``, then count, height,
width and channels as u32 little-endian, then raw channel-major u8 pixels) and
``labels.txt`` (one integer label per line).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from ..errors import FormatError, LabelError

_LOGGER = logging.getLogger(__name__)

MAGIC = b"KSIMG1"
IMAGES_FILE = "images.bin"
LABELS_FILE = "labels.txt"
_HEADER = struct.Struct("<4I")


@dataclass(frozen=True)
class DatasetContainer:
    """Images ``(N, C, H, W)`` uint8 with parallel integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise FormatError(
                f"images must be uint8 (N, C, H, W), got {self.images.dtype} {self.images.shape}"
            )
        if self.labels.shape != (self.images.shape[0],):
            raise LabelError(
                f"{self.labels.shape[0] if self.labels.ndim else 0} labels for {self.images.shape[0]} images"
            )

    @property
    def count(self) -> int:
        return int(self.images.shape[0])

    @property
    def height(self) -> int:
        return int(self.images.shape[2])

    @property
    def width(self) -> int:
        return int(self.images.shape[3])

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    def __len__(self) -> int:
        return self.count

    def subset(self, indices: Sequence[int]) -> "DatasetContainer":
        index = np.asarray(list(indices), dtype=np.int64)
        return DatasetContainer(self.images[index], self.labels[index])

    def head(self, count: int) -> "DatasetContainer":
        return DatasetContainer(self.images[:count], self.labels[:count])

    def tensors(self, dtype: torch.dtype = torch.float32):
        """Images scaled to ``[0, 1]`` and int64 labels."""

        images = torch.from_numpy(self.images.astype(np.float32) / 255.0).to(dtype)
        labels = torch.from_numpy(self.labels.astype(np.int64))
        return images, labels

    def check_labels(self, num_classes: int) -> None:
        if self.count and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise LabelError(
                f"labels must lie in [0, {num_classes}), found range "
                f"[{int(self.labels.min())}, {int(self.labels.max())}]"
            )


def empty_dataset(height: int, width: int, channels: int = 3) -> DatasetContainer:
    return DatasetContainer(
        np.zeros((0, channels, height, width), dtype=np.uint8), np.zeros((0,), dtype=np.int64)
    )


def save_dataset(directory: Union[str, Path], dataset: DatasetContainer) -> Path:
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    header = MAGIC + _HEADER.pack(dataset.count, dataset.height, dataset.width, dataset.channels)
    (target / IMAGES_FILE).write_bytes(header + np.ascontiguousarray(dataset.images).tobytes())
    (target / LABELS_FILE).write_text(
        "".join(f"{int(label)}\n" for label in dataset.labels), encoding="utf-8"
    )
    _LOGGER.info("Wrote %d images to %s", dataset.count, target)
    return target


def load_dataset(directory: Union[str, Path], num_classes: Optional[int] = None) -> DatasetContainer:
    """Read and validate a dataset directory; nothing is returned on failure."""

    source = Path(directory)
    images_path = source / IMAGES_FILE
    labels_path = source / LABELS_FILE
    try:
        payload = images_path.read_bytes()
    except OSError as exc:
        raise FormatError(f"Cannot read {images_path}: {exc}") from exc

    header_size = len(MAGIC) + _HEADER.size
    if len(payload) < header_size or not payload.startswith(MAGIC):
        raise FormatError(f"{images_path}: bad magic or truncated header")
    count, height, width, channels = _HEADER.unpack_from(payload, len(MAGIC))
    expected = count * height * width * channels
    actual = len(payload) - header_size
    if actual != expected:
        raise FormatError(f"{images_path}: expected {expected} body bytes, found {actual}")
    images = (
        np.frombuffer(payload, dtype=np.uint8, offset=header_size)
        .reshape(count, channels, height, width)
        .copy()
    )

    try:
        lines = [line for line in labels_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as exc:
        raise LabelError(f"Cannot read {labels_path}: {exc}") from exc
    if len(lines) != count:
        raise LabelError(f"{labels_path}: {len(lines)} labels for {count} images")
    try:
        labels = np.asarray([int(line) for line in lines], dtype=np.int64)
    except ValueError as exc:
        raise LabelError(f"{labels_path}: non-integer label ({exc})") from exc

    dataset = DatasetContainer(images, labels)
    if num_classes is not None:
        dataset.check_labels(num_classes)
    _LOGGER.debug("Loaded %d images (%dx%dx%d) from %s", count, channels, height, width, source)
    return dataset


__all__ = [
    "DatasetContainer",
    "IMAGES_FILE",
    "LABELS_FILE",
    "MAGIC",
    "empty_dataset",
    "load_dataset",
    "save_dataset",
]
