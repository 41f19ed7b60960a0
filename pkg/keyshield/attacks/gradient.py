"""Gradient attacks: FGSM and multi-restart PGD under linf and l2."""
from __future__ import annotations

import logging
from typing import Callable, Optional, Tuple

import torch
import torch.nn.functional as F

from ..autodiff import kernels
from ..autodiff.tape import GradTape, backward
from ..transform.prng import SplitMix64
from .config import AdvExample, AttackConfig

_LOGGER = logging.getLogger(__name__)

ZERO_GRADIENT = 1e-12

Forward = Callable[[torch.Tensor], torch.Tensor]
# Per-image loss the attack ascends, shape (B,).
Objective = Callable[[torch.Tensor], torch.Tensor]
# Per-image attack success, bool (B,).
Success = Callable[[torch.Tensor], torch.Tensor]


def _loss_labels(labels: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    if config.targeted is None:
        return labels
    return torch.full_like(labels, config.targeted)


def cross_entropy_objective(forward: Forward, labels: torch.Tensor, config: AttackConfig) -> Objective:
    """Per-image loss to ascend; targeted attacks descend the target's loss."""

    targets = _loss_labels(labels, config)
    sign = 1.0 if config.targeted is None else -1.0

    def objective(x: torch.Tensor) -> torch.Tensor:
        logits = forward(x)
        config.check_target(logits.shape[1])
        return sign * F.cross_entropy(logits, targets, reduction="none")

    return objective


def misclassification(forward: Forward, labels: torch.Tensor, config: AttackConfig) -> Success:
    def succeeded(x: torch.Tensor) -> torch.Tensor:
        predicted = kernels.predicted_labels(forward(x))
        if config.targeted is None:
            return predicted != labels
        return predicted == config.targeted

    return succeeded


def input_gradient(objective: Objective, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gradient of the summed objective w.r.t. ``x`` and the per-image values."""

    with GradTape() as tape:
        watched = tape.watch(x)
        values = objective(watched)
        total = tape.record("objective", values.sum())
    gradient = backward(tape, total, inputs=watched).input
    return gradient, values.detach()


def _flat_norm(tensor: torch.Tensor) -> torch.Tensor:
    return tensor.reshape(tensor.shape[0], -1).norm(p=2, dim=1)


def _per_image(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return values.reshape((-1,) + (1,) * (like.dim() - 1))


def _normalized(gradient: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """``g / ||g||`` per image, zero where ``||g|| < 1e-12``; also the skip mask."""

    norms = _flat_norm(gradient)
    skipped = norms < ZERO_GRADIENT
    safe = torch.where(skipped, torch.ones_like(norms), norms)
    direction = gradient / _per_image(safe, gradient)
    return direction * _per_image((~skipped).to(gradient.dtype), gradient), skipped


def project(x: torch.Tensor, candidate: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    """Project onto the epsilon-ball around ``x``, then clip to ``[0, 1]``."""

    if config.norm == "linf":
        bounded = torch.min(torch.max(candidate, x - config.epsilon), x + config.epsilon)
    else:
        delta = candidate - x
        norms = _flat_norm(delta)
        factor = torch.where(
            norms > config.epsilon, config.epsilon / torch.clamp(norms, min=ZERO_GRADIENT), torch.ones_like(norms)
        )
        bounded = x + delta * _per_image(factor, delta)
    return bounded.clamp(0.0, 1.0)


def random_start(x: torch.Tensor, config: AttackConfig, generator: torch.Generator) -> torch.Tensor:
    """Uniform draw inside the epsilon-ball, clipped to ``[0, 1]``."""

    if config.norm == "linf":
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
        return project(x, x + config.epsilon * noise, config)
    direction = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    direction = direction / _per_image(torch.clamp(_flat_norm(direction), min=ZERO_GRADIENT), direction)
    dims = x[0].numel()
    radius = torch.rand(x.shape[0], generator=generator, dtype=x.dtype) ** (1.0 / dims)
    return project(x, x + config.epsilon * direction * _per_image(radius, x), config)


def _step(adv: torch.Tensor, gradient: torch.Tensor, size: float, norm: str) -> Tuple[torch.Tensor, int]:
    if norm == "linf":
        return adv + size * gradient.sign(), 0
    direction, skipped = _normalized(gradient)
    return adv + size * direction, int(skipped.sum())


def fgsm(forward: Forward, x: torch.Tensor, y: torch.Tensor, config: AttackConfig) -> AdvExample:
    """One step of size epsilon along the gradient sign (linf) or direction (l2)."""

    x = x.detach()
    objective = cross_entropy_objective(forward, y, config)
    gradient, _ = input_gradient(objective, x)
    candidate, skipped = _step(x, gradient, config.epsilon, config.norm)
    if skipped:
        _LOGGER.warning("fgsm: %d images had a vanishing gradient", skipped)
    return AdvExample(x, project(x, candidate, config), y, config, skipped)


def ascend(
    objective: Objective,
    x: torch.Tensor,
    config: AttackConfig,
    succeeded: Optional[Success] = None,
    stream: str = "",
) -> Tuple[torch.Tensor, int]:
    """Projected gradient ascent on ``objective`` with restarts.

    Each image keeps the restart that succeeds, falling back to the highest
    final objective. Returns the perturbed batch and the number of skipped
    zero-gradient l2 updates.
    """

    x = x.detach()
    root = SplitMix64(config.seed).split(f"pgd:{stream}")
    step = config.effective_step
    best: Optional[torch.Tensor] = None
    best_value: Optional[torch.Tensor] = None
    best_success: Optional[torch.Tensor] = None
    zero_steps = 0

    for restart in range(config.effective_restarts):
        if config.random_start:
            adv = random_start(x, config, root.split(f"restart:{restart}").torch_generator())
        else:
            adv = x.clone()
        for _ in range(config.steps):
            gradient, _ = input_gradient(objective, adv)
            candidate, skipped = _step(adv, gradient, step, config.norm)
            zero_steps += skipped
            adv = project(x, candidate, config).detach()

        if config.effective_restarts == 1:
            best = adv
            break
        with torch.no_grad():
            value = objective(adv)
            success = succeeded(adv) if succeeded is not None else torch.zeros_like(value, dtype=torch.bool)
        if best is None:
            best, best_value, best_success = adv, value, success
            continue
        better = (success & ~best_success) | ((success == best_success) & (value > best_value))
        mask = _per_image(better, adv)
        best = torch.where(mask, adv, best)
        best_value = torch.where(better, value, best_value)
        best_success = best_success | success

    if zero_steps:
        _LOGGER.warning("pgd: skipped %d zero-gradient l2 updates", zero_steps)
    return best, zero_steps


def pgd(
    forward: Forward, x: torch.Tensor, y: torch.Tensor, config: AttackConfig, stream: str = ""
) -> AdvExample:
    """PGD against a single differentiable classifier."""

    x = x.detach()
    perturbed, zero_steps = ascend(
        cross_entropy_objective(forward, y, config),
        x,
        config,
        misclassification(forward, y, config),
        stream=stream,
    )
    return AdvExample(x, perturbed, y, config, zero_steps)


__all__ = [
    "ascend",
    "cross_entropy_objective",
    "fgsm",
    "input_gradient",
    "misclassification",
    "pgd",
    "project",
    "random_start",
]
