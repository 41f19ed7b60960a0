"""Block-wise pixel shuffling of images with a keyed permutation.

An image of shape ``(3, h, w)`` is cut into non-overlapping ``M x M`` blocks in
row-major block order. Each block is flattened channel-major (all R, then G,
then B; row-major inside a channel) into a vector ``b`` of length ``3M^2`` and
rewritten as ``b'[k] = b[v[k]]``.
"""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, List, Optional

import numpy as np
import torch

from ..errors import DimensionError
from .keys import PermutationVector, SecretKey, derive_permutation

if TYPE_CHECKING:  # pragma: no cover
    from ..evaluation.container import DatasetContainer

_LOGGER = logging.getLogger(__name__)


def _check_layout(shape, block_size: int) -> None:
    if len(shape) < 3 or shape[-3] != 3:
        raise DimensionError(f"Expected 3-channel channel-major image(s), got shape {tuple(shape)}")
    height, width = shape[-2], shape[-1]
    if height % block_size or width % block_size:
        raise DimensionError(
            f"Image {height}x{width} is not divisible by block size {block_size}"
        )


def _permute_blocks(images: np.ndarray, index: np.ndarray, block_size: int) -> np.ndarray:
    batch, channels, height, width = images.shape
    gh, gw = height // block_size, width // block_size
    blocks = images.reshape(batch, channels, gh, block_size, gw, block_size)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(batch, gh, gw, -1)
    blocks = np.take(blocks, index, axis=-1)
    blocks = blocks.reshape(batch, gh, gw, channels, block_size, block_size)
    return np.ascontiguousarray(blocks.transpose(0, 3, 1, 4, 2, 5).reshape(images.shape))


def _permute_blocks_tensor(images: torch.Tensor, index: torch.Tensor, block_size: int) -> torch.Tensor:
    batch, channels, height, width = images.shape
    gh, gw = height // block_size, width // block_size
    blocks = images.reshape(batch, channels, gh, block_size, gw, block_size)
    blocks = blocks.permute(0, 2, 4, 1, 3, 5).reshape(batch, gh, gw, -1)
    blocks = blocks.index_select(-1, index)
    blocks = blocks.reshape(batch, gh, gw, channels, block_size, block_size)
    return blocks.permute(0, 3, 1, 4, 2, 5).reshape(images.shape)


def _apply(image: np.ndarray, index: np.ndarray, block_size: int) -> np.ndarray:
    image = np.asarray(image)
    _check_layout(image.shape, block_size)
    if image.ndim == 3:
        return _permute_blocks(image[None], index, block_size)[0]
    if image.ndim == 4:
        return _permute_blocks(image, index, block_size)
    raise DimensionError(f"Expected (3, h, w) or (B, 3, h, w), got shape {image.shape}")


def shuffle_image(image: np.ndarray, perm: PermutationVector) -> np.ndarray:
    """Encrypt ``image`` (or a batch of images) with ``perm``."""

    return _apply(image, perm.as_array(), perm.block_size)


def unshuffle_image(image: np.ndarray, perm: PermutationVector) -> np.ndarray:
    """Invert :func:`shuffle_image`."""

    return _apply(image, perm.inverse().as_array(), perm.block_size)


def _tensor_apply(images: torch.Tensor, perm: PermutationVector) -> torch.Tensor:
    _check_layout(images.shape, perm.block_size)
    index = torch.as_tensor(perm.entries, dtype=torch.long, device=images.device)
    if images.dim() == 3:
        return _permute_blocks_tensor(images.unsqueeze(0), index, perm.block_size)[0]
    if images.dim() != 4:
        raise DimensionError(f"Expected (3, h, w) or (B, 3, h, w), got shape {tuple(images.shape)}")
    return _permute_blocks_tensor(images, index, perm.block_size)


def shuffle_tensor(images: torch.Tensor, perm: PermutationVector) -> torch.Tensor:
    """Differentiable shuffle for float batches; its input gradient is the unshuffled output gradient."""

    return _tensor_apply(images, perm)


def unshuffle_tensor(images: torch.Tensor, perm: PermutationVector) -> torch.Tensor:
    return _tensor_apply(images, perm.inverse())


def encrypt_dataset(
    dataset: "DatasetContainer",
    key: SecretKey,
    block_size: int,
    workers: Optional[int] = None,
) -> "DatasetContainer":
    """Shuffle every image with the single permutation derived from ``key``."""

    perm = derive_permutation(key, block_size)
    images = dataset.images
    if images.shape[0] == 0:
        return dataclasses.replace(dataset, images=images.copy())
    _check_layout(images.shape, block_size)

    index = perm.as_array()
    workers = max(1, workers or 1)
    if workers == 1 or images.shape[0] < 2 * workers:
        encrypted = _permute_blocks(images, index, block_size)
    else:
        chunks: List[np.ndarray] = np.array_split(images, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda chunk: _permute_blocks(chunk, index, block_size), chunks))
        encrypted = np.concatenate(parts, axis=0)

    _LOGGER.debug("Encrypted %d images with block size %d", images.shape[0], block_size)
    return dataclasses.replace(dataset, images=encrypted, labels=dataset.labels.copy())


__all__ = [
    "encrypt_dataset",
    "shuffle_image",
    "shuffle_tensor",
    "unshuffle_image",
    "unshuffle_tensor",
]
