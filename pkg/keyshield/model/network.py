"""ConvMixer-style isotropic classifier with a swappable embedding and head."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import torch
from torch import nn

from ..autodiff import kernels
from ..errors import ShapeError
from .config import ModelConfig

_LOGGER = logging.getLogger(__name__)


def _uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class Norm(nn.Module):
    """Batch-statistics normalization with running averages."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.scale = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def reset_parameters(self) -> None:
        with torch.no_grad():
            self.scale.fill_(1.0)
            self.shift.zero_()
            self.running_mean.zero_()
            self.running_var.fill_(1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return kernels.batch_norm(
            x, self.running_mean, self.running_var, self.scale, self.shift, training=self.training
        )


class PatchEmbedding(nn.Module):
    """Strided patch convolution, GELU and its adjacent normalization."""

    def __init__(self, hidden_dim: int, patch_size: int) -> None:
        super().__init__()
        self.patch_size = patch_size
        self.weight = nn.Parameter(torch.empty(hidden_dim, 3, patch_size, patch_size))
        self.bias = nn.Parameter(torch.empty(hidden_dim))
        self.norm = Norm(hidden_dim)

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan_in = 3 * self.patch_size * self.patch_size
        _uniform_(self.weight, fan_in, generator)
        _uniform_(self.bias, fan_in, generator)
        self.norm.reset_parameters()

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """Raw patch projection, one column per patch."""

        return kernels.patch_conv(x, self.weight, self.bias, self.patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(kernels.gelu(self.project(x)))


class MixerBlock(nn.Module):
    """Residual depthwise mixing followed by pointwise mixing."""

    def __init__(self, hidden_dim: int, kernel_size: int) -> None:
        super().__init__()
        self.kernel_size = kernel_size
        self.depthwise_weight = nn.Parameter(torch.empty(hidden_dim, 1, kernel_size, kernel_size))
        self.depthwise_bias = nn.Parameter(torch.empty(hidden_dim))
        self.depthwise_norm = Norm(hidden_dim)
        self.pointwise_weight = nn.Parameter(torch.empty(hidden_dim, hidden_dim, 1, 1))
        self.pointwise_bias = nn.Parameter(torch.empty(hidden_dim))
        self.pointwise_norm = Norm(hidden_dim)

    def reset_parameters(self, generator: torch.Generator) -> None:
        depthwise_fan_in = self.kernel_size * self.kernel_size
        pointwise_fan_in = self.pointwise_weight.shape[1]
        _uniform_(self.depthwise_weight, depthwise_fan_in, generator)
        _uniform_(self.depthwise_bias, depthwise_fan_in, generator)
        _uniform_(self.pointwise_weight, pointwise_fan_in, generator)
        _uniform_(self.pointwise_bias, pointwise_fan_in, generator)
        self.depthwise_norm.reset_parameters()
        self.pointwise_norm.reset_parameters()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mixed = kernels.depthwise_conv(x, self.depthwise_weight, self.depthwise_bias)
        x = kernels.residual_add(x, self.depthwise_norm(kernels.gelu(mixed)))
        mixed = kernels.pointwise_conv(x, self.pointwise_weight, self.pointwise_bias)
        return self.pointwise_norm(kernels.gelu(mixed))


class MixerBackbone(nn.Module):
    """The frozen portion of the classifier: ``depth`` mixer blocks."""

    def __init__(self, hidden_dim: int, depth: int, kernel_size: int) -> None:
        super().__init__()
        self.blocks = nn.ModuleList(MixerBlock(hidden_dim, kernel_size) for _ in range(depth))
        self.frozen = False
        self.refresh_stats = False

    def reset_parameters(self, generator: torch.Generator) -> None:
        for block in self.blocks:
            block.reset_parameters(generator)

    def freeze(self, refresh_stats: bool = False) -> "MixerBackbone":
        """Stop gradient tracking; running statistics stay fixed unless ``refresh_stats``."""

        self.frozen = True
        self.refresh_stats = refresh_stats
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        return self.train(self.training)

    def unfreeze(self) -> "MixerBackbone":
        self.frozen = False
        self.refresh_stats = False
        for parameter in self.parameters():
            parameter.requires_grad_(True)
        return self

    def train(self, mode: bool = True) -> "MixerBackbone":
        return super().train(mode and (not self.frozen or self.refresh_stats))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class ClassifierHead(nn.Module):
    """Affine layer mapping pooled features to class logits."""

    def __init__(self, hidden_dim: int, num_classes: int) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, hidden_dim))
        self.bias = nn.Parameter(torch.empty(num_classes))

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan_in = self.weight.shape[1]
        _uniform_(self.weight, fan_in, generator)
        _uniform_(self.bias, fan_in, generator)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return kernels.affine(features, self.weight, self.bias)


def tensor_checksum(tensors: Mapping[str, torch.Tensor]) -> str:
    """sha256 over names and float32 bytes, in sorted name order."""

    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode("utf-8"))
        values = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy()
        digest.update(values.astype("<f4", copy=False).tobytes())
    return digest.hexdigest()


def backbone_checksum(backbone: MixerBackbone) -> str:
    return tensor_checksum(backbone.state_dict())


_STAT_SUFFIXES = ("running_mean", "running_var")


def running_statistics(backbone: MixerBackbone) -> Dict[str, torch.Tensor]:
    return OrderedDict(
        (name, value.detach().clone())
        for name, value in backbone.state_dict().items()
        if name.endswith(_STAT_SUFFIXES)
    )


@dataclass
class EmbeddingHeadPair:
    """A secret patch embedding and classifier head trained under one key.

    ``backbone_stats`` is only populated when fine-tuning re-estimated the
    backbone's running statistics; it then overrides them when attached.
    """

    embedding: PatchEmbedding
    head: ClassifierHead
    key_id: Optional[int] = None
    backbone_stats: Dict[str, torch.Tensor] = field(default_factory=dict)

    def validate(self, config: ModelConfig) -> None:
        expected: Tuple[Tuple[str, Tuple[int, ...], Tuple[int, ...]], ...] = (
            (
                "embedding",
                tuple(self.embedding.weight.shape),
                (config.hidden_dim, 3, config.patch_size, config.patch_size),
            ),
            ("head", tuple(self.head.weight.shape), (config.num_classes, config.hidden_dim)),
        )
        for name, actual, wanted in expected:
            if actual != wanted:
                raise ShapeError("swap_pair", [actual, wanted], f"{name} does not match config")

    def tensors(self) -> Dict[str, torch.Tensor]:
        named: Dict[str, torch.Tensor] = OrderedDict()
        for name, value in self.embedding.state_dict().items():
            named[f"embedding.{name}"] = value
        for name, value in self.head.state_dict().items():
            named[f"head.{name}"] = value
        for name, value in self.backbone_stats.items():
            named[f"backbone_stats.{name}"] = value
        return named

    @classmethod
    def from_tensors(
        cls,
        config: ModelConfig,
        tensors: Mapping[str, torch.Tensor],
        key_id: Optional[int] = None,
    ) -> "EmbeddingHeadPair":
        embedding = PatchEmbedding(config.hidden_dim, config.patch_size)
        head = ClassifierHead(config.hidden_dim, config.num_classes)
        groups: Dict[str, Dict[str, torch.Tensor]] = {"embedding": {}, "head": {}, "backbone_stats": {}}
        for name, value in tensors.items():
            prefix, _, rest = name.partition(".")
            if prefix not in groups:
                raise ShapeError("load_pair", [tuple(value.shape)], f"unexpected tensor {name!r}")
            groups[prefix][rest] = value
        try:
            embedding.load_state_dict(groups["embedding"])
            head.load_state_dict(groups["head"])
        except RuntimeError as exc:
            raise ShapeError("load_pair", [], str(exc)) from exc
        return cls(embedding, head, key_id=key_id, backbone_stats=OrderedDict(groups["backbone_stats"]))

    def clone(self, key_id: Optional[int] = None) -> "EmbeddingHeadPair":
        return EmbeddingHeadPair(
            copy.deepcopy(self.embedding),
            copy.deepcopy(self.head),
            key_id=self.key_id if key_id is None else key_id,
            backbone_stats=OrderedDict((k, v.clone()) for k, v in self.backbone_stats.items()),
        )

    def parameters(self) -> Iterable[nn.Parameter]:
        yield from self.embedding.parameters()
        yield from self.head.parameters()

    def checksum(self) -> str:
        return tensor_checksum(self.tensors())


class IsotropicNet(nn.Module):
    """Patch embedding, mixer backbone, global pooling and classifier head."""

    def __init__(
        self,
        config: ModelConfig,
        embedding: PatchEmbedding,
        backbone: MixerBackbone,
        head: ClassifierHead,
        key_id: Optional[int] = None,
    ) -> None:
        super().__init__()
        self.config = config
        self.embedding = embedding
        self.backbone = backbone
        self.head = head
        self.key_id = key_id

    @property
    def pair(self) -> EmbeddingHeadPair:
        return EmbeddingHeadPair(self.embedding, self.head, key_id=self.key_id)

    def _check_input(self, batch: torch.Tensor) -> None:
        side = self.config.image_side
        if batch.dim() != 4 or tuple(batch.shape[1:]) != (3, side, side):
            raise ShapeError("forward", [tuple(batch.shape)], f"expected (B, 3, {side}, {side})")

    def embed(self, batch: torch.Tensor) -> torch.Tensor:
        self._check_input(batch)
        return self.embedding(batch)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        features = self.backbone(self.embed(batch))
        return self.head(kernels.global_avg_pool(features))

    def pair_parameters(self) -> Dict[str, nn.Parameter]:
        named: Dict[str, nn.Parameter] = OrderedDict()
        for name, value in self.embedding.named_parameters():
            named[f"embedding.{name}"] = value
        for name, value in self.head.named_parameters():
            named[f"head.{name}"] = value
        return named


def init_model(config: ModelConfig, seed: int) -> IsotropicNet:
    """Fresh parameters with uniform fan-in scaling; deterministic in ``seed``."""

    generator = torch.Generator().manual_seed(seed)
    embedding = PatchEmbedding(config.hidden_dim, config.patch_size)
    backbone = MixerBackbone(config.hidden_dim, config.depth, config.kernel_size)
    head = ClassifierHead(config.hidden_dim, config.num_classes)
    embedding.reset_parameters(generator)
    backbone.reset_parameters(generator)
    head.reset_parameters(generator)
    _LOGGER.debug("Initialised model %s with seed %d", config, seed)
    return IsotropicNet(config, embedding, backbone, head)


def forward(params: IsotropicNet, batch: torch.Tensor) -> torch.Tensor:
    return params(batch)


def attach_pair(
    config: ModelConfig, backbone: MixerBackbone, pair: EmbeddingHeadPair, training: bool = False
) -> IsotropicNet:
    """Build a classifier from a shared backbone and one pair.

    The shared backbone is never mutated: when the pair carries its own running
    statistics they are loaded into a private copy.
    """

    pair.validate(config)
    if pair.backbone_stats:
        backbone = copy.deepcopy(backbone)
        state = backbone.state_dict()
        with torch.no_grad():
            for name, value in pair.backbone_stats.items():
                if name not in state or state[name].shape != value.shape:
                    raise ShapeError("swap_pair", [tuple(value.shape)], f"unknown statistic {name!r}")
                state[name].copy_(value)
    net = IsotropicNet(config, pair.embedding, backbone, pair.head, key_id=pair.key_id)
    return net.train(training)


def swap_pair(params: IsotropicNet, pair: EmbeddingHeadPair) -> IsotropicNet:
    """Replace the active (embedding, head) pair; the backbone is shared untouched."""

    return attach_pair(params.config, params.backbone, pair, training=params.training)


__all__ = [
    "ClassifierHead",
    "EmbeddingHeadPair",
    "IsotropicNet",
    "MixerBackbone",
    "MixerBlock",
    "Norm",
    "PatchEmbedding",
    "attach_pair",
    "backbone_checksum",
    "forward",
    "init_model",
    "running_statistics",
    "swap_pair",
    "tensor_checksum",
]
