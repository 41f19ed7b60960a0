"""Gradient attacks, transfer scenarios and the EoT adaptive attack."""

from .config import AdvExample, AttackConfig, budget
from .gradient import fgsm, pgd
from .metrics import (
    AttackSuccess,
    Selection,
    attack_success_rate,
    defended_accuracy,
    select_correct,
)
from .scenarios import (
    build_attacker_pool,
    eot_arm,
    eot_attack,
    eot_objective,
    guessed_key_model,
    scenario1_transfer,
    scenario2_transfer,
    white_box_arm,
    white_box_attack,
)

__all__ = [
    "AdvExample",
    "AttackConfig",
    "AttackSuccess",
    "Selection",
    "attack_success_rate",
    "budget",
    "build_attacker_pool",
    "defended_accuracy",
    "eot_arm",
    "eot_attack",
    "eot_objective",
    "fgsm",
    "guessed_key_model",
    "pgd",
    "scenario1_transfer",
    "scenario2_transfer",
    "select_correct",
    "white_box_arm",
    "white_box_attack",
]
