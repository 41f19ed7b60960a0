"""Attack configuration and the adversarial-example record."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import torch

from ..errors import ConfigError, NumericalError
from ..transform.keys import SecretKey

NORMS = ("linf", "l2")
BUDGET_TOLERANCE = 1e-6


def budget(numerator: float, denominator: float = 255) -> float:
    """Pixel budget ``numerator / denominator`` in ``[0, 1]`` units."""

    if denominator <= 0:
        raise ConfigError("denominator must be > 0")
    return numerator / denominator


@dataclass(frozen=True)
class AttackConfig:
    """Norm-bounded attack settings.

    ``step_size`` defaults to ``epsilon / 4`` under linf and
    ``epsilon / 2 / sqrt(steps)`` under l2. ``restarts`` only applies with a
    random start; without one every restart would repeat the same path.
    """

    norm: str = "linf"
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: Optional[float] = None
    random_start: bool = True
    restarts: int = 3
    targeted: Optional[int] = None
    eot_keys: Tuple[SecretKey, ...] = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.norm == "linf" and self.epsilon > 1:
            raise ConfigError("linf epsilon must lie in [0, 1]")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.targeted is not None and self.targeted < 0:
            raise ConfigError("target class must be >= 0")
        object.__setattr__(self, "eot_keys", tuple(self.eot_keys))

    @property
    def effective_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.norm == "linf":
            return self.epsilon / 4
        return self.epsilon / 2 / math.sqrt(self.steps)

    @property
    def effective_restarts(self) -> int:
        return self.restarts if self.random_start else 1

    def check_target(self, num_classes: int) -> None:
        if self.targeted is not None and self.targeted >= num_classes:
            raise ConfigError(f"target class {self.targeted} outside [0, {num_classes})")

    def describe(self) -> str:
        mode = "untargeted" if self.targeted is None else f"target={self.targeted}"
        return f"{self.norm} eps={self.epsilon:.5f} steps={self.steps} {mode}"


def perturbation_norms(original: torch.Tensor, perturbed: torch.Tensor, norm: str) -> torch.Tensor:
    """Per-image norm of ``perturbed - original``."""

    delta = (perturbed - original).reshape(original.shape[0], -1)
    if norm == "linf":
        return delta.abs().amax(dim=1) if delta.shape[1] else delta.new_zeros(delta.shape[0])
    return delta.norm(p=2, dim=1)


@dataclass
class AdvExample:
    """A batch of perturbed images with the inputs and settings that produced it.

    Construction asserts the budget (within ``1e-6``) and the ``[0, 1]`` clip.
    """

    original: torch.Tensor
    perturbed: torch.Tensor
    true_label: torch.Tensor
    config: AttackConfig
    zero_gradient_steps: int = 0

    def __post_init__(self) -> None:
        if self.original.shape != self.perturbed.shape:
            raise NumericalError(
                f"perturbed shape {tuple(self.perturbed.shape)} differs from {tuple(self.original.shape)}"
            )
        if self.perturbed.numel() and (self.perturbed.min() < 0 or self.perturbed.max() > 1):
            raise NumericalError("perturbed values left [0, 1]")
        if self.count:
            worst = float(self.norms().max())
            if worst > self.config.epsilon + BUDGET_TOLERANCE:
                raise NumericalError(
                    f"{self.config.norm} perturbation {worst:.3e} exceeds budget {self.config.epsilon:.3e}"
                )

    @property
    def count(self) -> int:
        return int(self.original.shape[0])

    def norms(self) -> torch.Tensor:
        return perturbation_norms(self.original, self.perturbed, self.config.norm)

    def loss_labels(self) -> torch.Tensor:
        """Labels the attack optimized against: the target when targeted."""

        if self.config.targeted is None:
            return self.true_label
        return torch.full_like(self.true_label, self.config.targeted)

    @classmethod
    def concat(cls, parts: "list[AdvExample]", config: AttackConfig) -> "AdvExample":
        return cls(
            torch.cat([part.original for part in parts]),
            torch.cat([part.perturbed for part in parts]),
            torch.cat([part.true_label for part in parts]),
            config,
            sum(part.zero_gradient_steps for part in parts),
        )


__all__ = [
    "AdvExample",
    "AttackConfig",
    "BUDGET_TOLERANCE",
    "NORMS",
    "budget",
    "perturbation_norms",
]
