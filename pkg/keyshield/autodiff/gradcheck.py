"""Central-difference verification of tape gradients."""
from __future__ import annotations

import logging
from typing import Callable, Optional

import torch

from .tape import GradTape, backward

_LOGGER = logging.getLogger(__name__)


def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-4,
    sample: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between backward's gradient and central differences.

    The relative error of one coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    ``x`` is promoted to float64; ``f`` must accept float64 input. With
    ``sample`` set, only that many coordinates (drawn with ``seed``) are checked.
    """

    x = x.detach().to(torch.float64)
    with GradTape() as tape:
        watched = tape.watch(x)
        value = f(watched)
        if not tape.owns(value):
            tape.record("objective", value)
    analytic = backward(tape, value, inputs=watched).input.reshape(-1)

    flat = x.reshape(-1)
    coordinates = torch.arange(flat.numel())
    if sample is not None and sample < flat.numel():
        generator = torch.Generator().manual_seed(seed)
        coordinates = torch.randperm(flat.numel(), generator=generator)[:sample]

    worst = 0.0
    with torch.no_grad():
        for index in coordinates.tolist():
            plus = flat.clone()
            plus[index] += eps
            minus = flat.clone()
            minus[index] -= eps
            numeric = (
                f(plus.reshape(x.shape)).item() - f(minus.reshape(x.shape)).item()
            ) / (2.0 * eps)
            exact = analytic[index].item()
            denominator = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denominator)

    _LOGGER.debug("finite_diff_check compared %d coordinates, max rel err %.3e", len(coordinates), worst)
    return worst


__all__ = ["finite_diff_check"]
