"""Pydantic documents for experiments, reports and adversarial sets."""
from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

ArmLiteral = Literal["clean", "white", "scenario1", "scenario2", "eot"]
NormLiteral = Literal["linf", "l2"]
ARM_ORDER: Tuple[str, ...] = ("clean", "white", "scenario1", "scenario2", "eot")

SUBSTITUTION_NOTE = "multi-restart PGD stands in for the AutoAttack ensemble"


class ExperimentConfig(BaseModel):
    """Declared arms and every knob that feeds their randomness.

    All stochastic choices derive from ``seed`` through named sub-streams.
    """

    seed: int = Field(default=0, ge=0)
    arms: List[ArmLiteral] = Field(default_factory=lambda: list(ARM_ORDER))
    norms: List[NormLiteral] = Field(default_factory=lambda: ["linf"])
    linf_epsilon: float = Field(default=8 / 255, ge=0.0, le=1.0)
    l2_epsilon: float = Field(default=0.5, ge=0.0)
    steps: int = Field(default=20, ge=1)
    restarts: int = Field(default=3, ge=1)
    random_start: bool = Field(default=True)
    targeted: Optional[int] = Field(default=None, ge=0)
    test_dir: str = Field(default="test")
    train_dir: Optional[str] = Field(default="train")
    test_limit: Optional[int] = Field(default=None, ge=1)
    selection_size: int = Field(default=200, ge=1)
    pool_sizes: Optional[List[int]] = Field(default=None)
    eot_pool_sizes: List[int] = Field(default_factory=lambda: [1, 3, 5])
    finetune_epochs: int = Field(default=10, ge=1)
    finetune_learning_rate: float = Field(default=0.01, gt=0.0)
    batch_size: int = Field(default=64, ge=1)

    @field_validator("arms")
    @classmethod
    def _order_arms(cls, value: List[str]) -> List[str]:
        return [arm for arm in ARM_ORDER if arm in set(value)]

    @field_validator("pool_sizes", "eot_pool_sizes")
    @classmethod
    def _positive_sizes(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and any(size < 1 for size in value):
            raise ValueError("pool sizes must be >= 1")
        return value

    def epsilon(self, norm: str) -> float:
        return self.linf_epsilon if norm == "linf" else self.l2_epsilon


class ArmResult(BaseModel):
    """One evaluated arm: its budget, key handling and the fractions measured."""

    arm: ArmLiteral
    norm: Literal["linf", "l2", "none"] = Field(default="none")
    epsilon: float = Field(default=0.0, ge=0.0)
    steps: int = Field(default=0, ge=0)
    key_mode: str
    pool_size: int = Field(ge=1)
    attacker_pool_size: Optional[int] = Field(default=None, ge=1)
    examples: int = Field(default=0, ge=0)
    clean_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    robust_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    surrogate_clean_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    surrogate_robust_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    asr: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    asr_single_draw: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    zero_gradient_steps: int = Field(default=0, ge=0)
    seconds: float = Field(default=0.0, ge=0.0)

    @property
    def label(self) -> str:
        label = f"{self.arm}/pool={self.pool_size}"
        if self.attacker_pool_size is not None:
            label = f"{label}/attackers={self.attacker_pool_size}"
        return label

    def metrics(self) -> List[Tuple[str, float]]:
        """Measured fractions in a fixed order, skipping the unmeasured ones."""

        names = (
            "clean_accuracy",
            "robust_accuracy",
            "surrogate_clean_accuracy",
            "surrogate_robust_accuracy",
            "asr",
            "asr_single_draw",
        )
        if self.arm == "clean":
            names = ("clean_accuracy",)
        return [(name, getattr(self, name)) for name in names if getattr(self, name) is not None]


class EvalReport(BaseModel):
    manifest_hash: str
    config: ExperimentConfig
    arms: List[ArmResult] = Field(default_factory=list)
    clean_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    partial: bool = Field(default=False)
    failed_stage: Optional[str] = Field(default=None)
    error: Optional[str] = Field(default=None)
    note: str = Field(default=SUBSTITUTION_NOTE)
    timing: Dict[str, float] = Field(default_factory=dict)

    def arm(self, name: str) -> List[ArmResult]:
        return [result for result in self.arms if result.arm == name]


class AdvSetMetadata(BaseModel):
    """Sidecar ``adv.json`` stored beside a persisted adversarial set."""

    method: Literal["fgsm", "pgd", "eot"]
    norm: NormLiteral
    epsilon: float = Field(ge=0.0)
    steps: int = Field(ge=1)
    seed: int = Field(ge=0)
    scenario: Literal["white", "1", "2"]
    count: int = Field(ge=0)
    targeted: Optional[int] = Field(default=None)
    note: str = Field(default=SUBSTITUTION_NOTE)


__all__ = [
    "ARM_ORDER",
    "AdvSetMetadata",
    "ArmLiteral",
    "ArmResult",
    "EvalReport",
    "ExperimentConfig",
    "SUBSTITUTION_NOTE",
]
