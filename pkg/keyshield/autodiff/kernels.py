"""Kernel catalog for the isotropic classifier.

Every kernel validates shapes before dispatching to ``torch.nn.functional`` and
records its output on the active :class:`~keyshield.autodiff.tape.GradTape`.
"""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import torch
import torch.nn.functional as F

from ..config import debug_enabled
from ..errors import NumericalError, ShapeError
from .tape import record

NORM_MOMENTUM = 0.9
NORM_EPS = 1e-5


def _emit(kind: str, output: torch.Tensor) -> torch.Tensor:
    if debug_enabled() and not torch.isfinite(output).all():
        raise NumericalError(f"{kind} produced non-finite values")
    return record(kind, output)


def _shapes(*tensors: Optional[torch.Tensor]):
    return [tuple(t.shape) for t in tensors if t is not None]


def patch_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Strided convolution with kernel = stride = ``patch_size``."""

    if (
        x.dim() != 4
        or weight.dim() != 4
        or weight.shape[1] != x.shape[1]
        or weight.shape[2:] != (patch_size, patch_size)
        or bias.shape != (weight.shape[0],)
    ):
        raise ShapeError("patch_conv", _shapes(x, weight, bias))
    if x.shape[2] % patch_size or x.shape[3] % patch_size:
        raise ShapeError("patch_conv", _shapes(x, weight, bias), "input not divisible by patch size")
    return _emit("patch_conv", F.conv2d(x, weight, bias, stride=patch_size))


def depthwise_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-channel convolution with same-padding."""

    channels = x.shape[1] if x.dim() == 4 else -1
    if (
        x.dim() != 4
        or weight.dim() != 4
        or weight.shape[:2] != (channels, 1)
        or bias.shape != (channels,)
    ):
        raise ShapeError("depthwise_conv", _shapes(x, weight, bias))
    return _emit("depthwise_conv", F.conv2d(x, weight, bias, padding="same", groups=channels))


def pointwise_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """1x1 convolution mixing channels."""

    if (
        x.dim() != 4
        or weight.dim() != 4
        or weight.shape[1] != x.shape[1]
        or weight.shape[2:] != (1, 1)
        or bias.shape != (weight.shape[0],)
    ):
        raise ShapeError("pointwise_conv", _shapes(x, weight, bias))
    return _emit("pointwise_conv", F.conv2d(x, weight, bias))


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact Gaussian-CDF GELU."""

    return _emit("gelu", F.gelu(x, approximate="none"))


def batch_norm(
    x: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    scale: torch.Tensor,
    shift: torch.Tensor,
    training: bool,
    momentum: float = NORM_MOMENTUM,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Per-channel normalization with learned scale/shift.

    ``momentum`` is the weight kept on the running statistics
    (``running = momentum * running + (1 - momentum) * batch``).
    """

    channels = x.shape[1] if x.dim() >= 2 else -1
    if x.dim() != 4 or any(t.shape != (channels,) for t in (running_mean, running_var, scale, shift)):
        raise ShapeError("batch_norm", _shapes(x, running_mean, running_var, scale, shift))
    out = F.batch_norm(
        x,
        running_mean,
        running_var,
        weight=scale,
        bias=shift,
        training=training,
        momentum=1.0 - momentum,
        eps=eps,
    )
    return _emit("batch_norm", out)


def residual_add(x: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    if x.shape != residual.shape:
        raise ShapeError("residual_add", _shapes(x, residual))
    return _emit("residual_add", x + residual)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    """Mean over the spatial axes, ``(B, C, H, W) -> (B, C)``."""

    if x.dim() != 4:
        raise ShapeError("global_avg_pool", _shapes(x))
    return _emit("global_avg_pool", x.mean(dim=(2, 3)))


def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    if (
        x.dim() != 2
        or weight.dim() != 2
        or weight.shape[1] != x.shape[1]
        or bias.shape != (weight.shape[0],)
    ):
        raise ShapeError("affine", _shapes(x, weight, bias))
    return _emit("affine", F.linear(x, weight, bias))


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy over the batch."""

    if logits.dim() != 2 or labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError("softmax_cross_entropy", _shapes(logits, labels))
    return _emit("softmax_cross_entropy", F.cross_entropy(logits, labels.long()))


def predicted_labels(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over classes; ties go to the lowest class index."""

    if logits.dim() != 2:
        raise ShapeError("predicted_labels", _shapes(logits))
    # torch.argmax returns the first maximal index.
    return torch.argmax(logits, dim=1)


KERNELS: Dict[str, Callable[..., torch.Tensor]] = {
    "patch_conv": patch_conv,
    "depthwise_conv": depthwise_conv,
    "pointwise_conv": pointwise_conv,
    "gelu": gelu,
    "batch_norm": batch_norm,
    "residual_add": residual_add,
    "global_avg_pool": global_avg_pool,
    "affine": affine,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def primitive_forward(kind: str, inputs: Sequence[torch.Tensor], **attrs) -> torch.Tensor:
    """Dispatch one kernel of the catalog by name."""

    try:
        kernel = KERNELS[kind]
    except KeyError:
        raise ShapeError(kind, _shapes(*inputs), "unknown kernel") from None
    return kernel(*inputs, **attrs)


__all__ = [
    "KERNELS",
    "NORM_EPS",
    "NORM_MOMENTUM",
    "affine",
    "batch_norm",
    "depthwise_conv",
    "gelu",
    "global_avg_pool",
    "patch_conv",
    "pointwise_conv",
    "predicted_labels",
    "primitive_forward",
    "residual_add",
    "softmax_cross_entropy",
]
