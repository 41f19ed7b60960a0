"""The defended classifier: a key pool over one frozen backbone."""
from __future__ import annotations

import copy
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..autodiff import kernels
from ..errors import ConfigError, DimensionError, DuplicateKeyError, KeyIndexError
from ..evaluation.container import DatasetContainer
from ..model.config import ModelConfig
from ..model.network import EmbeddingHeadPair, IsotropicNet, MixerBackbone, attach_pair
from ..transform.keys import PermutationVector, SecretKey, derive_permutation
from ..transform.prng import SplitMix64
from ..transform.shuffle import shuffle_tensor
from .config import TrainConfig
from .training import finetune_pair

_LOGGER = logging.getLogger(__name__)

ImageLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class PoolEntry:
    key: SecretKey
    perm: PermutationVector
    pair: EmbeddingHeadPair


class KeySampler:
    """Uniform draws of a 1-based key index from a splitmix64 stream."""

    def __init__(self, rng: SplitMix64, size: int) -> None:
        self._rng = rng
        self._size = size
        self._lock = threading.Lock()

    @property
    def size(self) -> int:
        return self._size

    def draw(self) -> int:
        with self._lock:
            return self._rng.below(self._size) + 1

    def draws(self, count: int) -> List[int]:
        with self._lock:
            return [self._rng.below(self._size) + 1 for _ in range(count)]


class DefendedClassifier:
    """Backbone plus N (key, permutation, pair) triples and a sampling policy.

    Inference models are built once and only read afterwards; sharing an
    instance across threads is safe as long as each thread draws from its own
    :meth:`sampler` stream (the default stream is lock-protected).
    """

    def __init__(
        self,
        config: ModelConfig,
        backbone: MixerBackbone,
        pool: Sequence[PoolEntry],
        block_size: int,
        sampler_seed: int = 0,
    ) -> None:
        if not pool:
            raise ConfigError("A defended classifier needs at least one key")
        for position, entry in enumerate(pool, start=1):
            if entry.pair.key_id != position:
                raise ConfigError(f"pair at position {position} carries key_id {entry.pair.key_id}")
            if entry.perm.block_size != block_size:
                raise ConfigError(f"permutation {position} uses block size {entry.perm.block_size}")
            entry.pair.validate(config)
        self.config = config
        self.backbone = backbone
        self.pool: Tuple[PoolEntry, ...] = tuple(pool)
        self.block_size = block_size
        self.sampler_seed = sampler_seed
        self._models: List[IsotropicNet] = [attach_pair(config, backbone, entry.pair) for entry in self.pool]
        self._default_sampler = self.sampler("default")

    @property
    def size(self) -> int:
        return len(self.pool)

    @property
    def keys(self) -> List[SecretKey]:
        return [entry.key for entry in self.pool]

    def sampler(self, stream: Union[str, int] = "default") -> KeySampler:
        """Independent sampler sub-stream split from the master sampler seed."""

        return KeySampler(SplitMix64(self.sampler_seed).split(f"sampler:{stream}"), self.size)

    @property
    def default_sampler(self) -> KeySampler:
        return self._default_sampler

    def _check_index(self, index: int) -> None:
        if not 1 <= index <= self.size:
            raise KeyIndexError(f"key index {index} outside 1..{self.size}")

    def model(self, index: int) -> IsotropicNet:
        self._check_index(index)
        return self._models[index - 1]

    def entry(self, index: int) -> PoolEntry:
        self._check_index(index)
        return self.pool[index - 1]

    def keyed_logits(self, images: torch.Tensor, index: int) -> torch.Tensor:
        """Differentiable logits of key ``index`` for ``[0, 1]`` images."""

        entry = self.entry(index)
        return self._models[index - 1](shuffle_tensor(images, entry.perm))

    def truncated(self, size: int) -> "DefendedClassifier":
        """The classifier restricted to its first ``size`` keys."""

        if not 1 <= size <= self.size:
            raise ConfigError(f"pool size {size} outside 1..{self.size}")
        return DefendedClassifier(
            self.config, self.backbone, self.pool[:size], self.block_size, self.sampler_seed
        )

    def clone(self) -> "DefendedClassifier":
        """Independent copy with its own backbone and pairs."""

        pool = [PoolEntry(entry.key, entry.perm, entry.pair.clone()) for entry in self.pool]
        return DefendedClassifier(
            self.config, copy.deepcopy(self.backbone), pool, self.block_size, self.sampler_seed
        )

    def to(self, dtype: torch.dtype) -> "DefendedClassifier":
        for model in self._models:
            model.to(dtype)
        return self


def as_batch(image: ImageLike) -> Tuple[torch.Tensor, bool]:
    """Float ``(B, 3, H, W)`` batch in ``[0, 1]`` and whether input was a single image."""

    if isinstance(image, np.ndarray):
        tensor = torch.from_numpy(image.astype(np.float32) / 255.0) if image.dtype == np.uint8 else torch.from_numpy(image)
    else:
        tensor = image
    if tensor.dim() == 3:
        return tensor.unsqueeze(0), True
    if tensor.dim() == 4:
        return tensor, False
    raise DimensionError(f"Expected (3, h, w) or (B, 3, h, w), got shape {tuple(tensor.shape)}")


def build_defense(
    backbone: IsotropicNet,
    keys: Sequence[SecretKey],
    dataset: DatasetContainer,
    config: TrainConfig,
    block_size: Optional[int] = None,
    sampler_seed: int = 0,
    workers: int = 1,
    allow_misaligned: bool = False,
) -> DefendedClassifier:
    """Fine-tune one pair per key (backbone frozen) and assemble the pool."""

    if not keys:
        raise ConfigError("At least one key is required")
    seeds = [key.seed for key in keys]
    if len(set(seeds)) != len(seeds):
        raise DuplicateKeyError("Duplicate key seeds in pool")
    block_size = block_size or backbone.config.patch_size
    backbone.backbone.freeze()

    def _finetune(position: int) -> EmbeddingHeadPair:
        _LOGGER.info("Fine-tuning pair %d/%d", position, len(keys))
        return finetune_pair(
            backbone,
            keys[position - 1],
            dataset,
            config,
            block_size=block_size,
            key_id=position,
            allow_misaligned=allow_misaligned,
        )

    positions = range(1, len(keys) + 1)
    if workers > 1 and not config.refresh_backbone_stats:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(_finetune, positions))
    else:
        pairs = [_finetune(position) for position in positions]

    entries = [
        PoolEntry(key, derive_permutation(key, block_size), pair) for key, pair in zip(keys, pairs)
    ]
    return DefendedClassifier(backbone.config, backbone.backbone, entries, block_size, sampler_seed)


@torch.no_grad()
def predict_with_key(d: DefendedClassifier, image: ImageLike, index: int) -> torch.Tensor:
    """Logits of the forced key ``index`` (1-based)."""

    batch, single = as_batch(image)
    logits = d.keyed_logits(batch, index)
    return logits[0] if single else logits


@torch.no_grad()
def defended_predict_batch(
    d: DefendedClassifier, images: ImageLike, sampler: Optional[KeySampler] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draw one key per image, classify each under its key."""

    batch, _ = as_batch(images)
    sampler = sampler or d.default_sampler
    indices = torch.tensor(sampler.draws(batch.shape[0]), dtype=torch.long)
    labels = torch.empty(batch.shape[0], dtype=torch.long)
    for index in torch.unique(indices).tolist():
        mask = indices == index
        labels[mask] = kernels.predicted_labels(d.keyed_logits(batch[mask], index))
    return labels, indices


def defended_predict(
    d: DefendedClassifier, image: ImageLike, sampler: Optional[KeySampler] = None
) -> Tuple[int, int]:
    """Randomized inference: returns ``(label, key_index)``."""

    batch, single = as_batch(image)
    if not single and batch.shape[0] != 1:
        raise DimensionError("defended_predict takes one image; use defended_predict_batch")
    labels, indices = defended_predict_batch(d, batch, sampler)
    return int(labels[0]), int(indices[0])


__all__ = [
    "DefendedClassifier",
    "KeySampler",
    "PoolEntry",
    "as_batch",
    "build_defense",
    "defended_predict",
    "defended_predict_batch",
    "predict_with_key",
]
