"""Kernel catalog, gradient tape and numerical checks."""

from .checkpoint import read_checkpoint, write_checkpoint
from .gradcheck import finite_diff_check
from .kernels import KERNELS, predicted_labels, primitive_forward
from .tape import GradTape, GradientMap, backward

__all__ = [
    "GradTape",
    "GradientMap",
    "KERNELS",
    "backward",
    "finite_diff_check",
    "predicted_labels",
    "primitive_forward",
    "read_checkpoint",
    "write_checkpoint",
]
