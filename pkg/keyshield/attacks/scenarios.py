"""Transfer scenarios, the EoT adaptive attack and the white-box control arm."""
from __future__ import annotations

import logging
import time
from typing import Callable, Optional, Sequence

import torch

from ..autodiff import kernels
from ..defense.classifier import DefendedClassifier, PoolEntry, build_defense
from ..defense.config import TrainConfig
from ..defense.training import finetune_pair
from ..errors import PoolKeyCollision
from ..evaluation.container import DatasetContainer
from ..evaluation.metrics import accuracy
from ..evaluation.schemas import ArmResult
from ..model.network import IsotropicNet
from ..transform.keys import SecretKey, derive_permutation
from .config import AdvExample, AttackConfig
from .gradient import Objective, ascend, cross_entropy_objective, pgd
from .metrics import Selection, attack_success_rate, defended_accuracy

_LOGGER = logging.getLogger(__name__)

BatchAttack = Callable[[torch.Tensor, torch.Tensor, str], AdvExample]


def attack_in_batches(
    attack: BatchAttack, images: torch.Tensor, labels: torch.Tensor, config: AttackConfig, batch_size: int = 64
) -> AdvExample:
    """Run ``attack`` over contiguous batches; batch ``k`` draws from stream ``batch:k``."""

    parts = [
        attack(images[start : start + batch_size], labels[start : start + batch_size], f"batch:{start // batch_size}")
        for start in range(0, images.shape[0], batch_size)
    ]
    return AdvExample.concat(parts, config)


def _check_disjoint(keys: Sequence[SecretKey], defended: DefendedClassifier) -> None:
    pool = {key.seed for key in defended.keys}
    for key in keys:
        if key.seed in pool:
            raise PoolKeyCollision(f"attacker key {key.seed} is a defender pool key")


def _plain_labels(model: IsotropicNet) -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda batch: kernels.predicted_labels(model(batch))


def scenario1_transfer(
    plain: IsotropicNet,
    defended: DefendedClassifier,
    testset: DatasetContainer,
    config: AttackConfig,
    batch_size: int = 64,
    clean_accuracy: Optional[float] = None,
) -> ArmResult:
    """PGD crafted on the pre-trained plain model, replayed against the defense."""

    started = time.perf_counter()
    images, labels = testset.tensors()
    plain.eval()
    adv = attack_in_batches(
        lambda x, y, stream: pgd(plain, x, y, config, stream=stream), images, labels, config, batch_size
    )
    if clean_accuracy is None:
        clean_accuracy = defended_accuracy(defended, testset)
    result = ArmResult(
        arm="scenario1",
        norm=config.norm,
        epsilon=config.epsilon,
        steps=config.steps,
        key_mode="plain-surrogate",
        pool_size=defended.size,
        examples=adv.count,
        clean_accuracy=clean_accuracy,
        robust_accuracy=defended_accuracy(defended, (adv.perturbed, labels)),
        surrogate_clean_accuracy=accuracy(_plain_labels(plain), testset),
        surrogate_robust_accuracy=accuracy(_plain_labels(plain), (adv.perturbed, labels)),
        zero_gradient_steps=adv.zero_gradient_steps,
        seconds=time.perf_counter() - started,
    )
    _LOGGER.info(
        "scenario1 %s: defended robust %.3f (clean %.3f), plain robust %.3f",
        config.describe(),
        result.robust_accuracy,
        result.clean_accuracy,
        result.surrogate_robust_accuracy,
    )
    return result


def guessed_key_model(
    backbone: IsotropicNet,
    guessed_key: SecretKey,
    defended: DefendedClassifier,
    trainset: DatasetContainer,
    train_config: TrainConfig,
    allow_pool_key: bool = False,
) -> DefendedClassifier:
    """The attacker's single-key defense, fine-tuned from the public backbone."""

    if not allow_pool_key:
        _check_disjoint([guessed_key], defended)
    pair = finetune_pair(backbone, guessed_key, trainset, train_config, block_size=defended.block_size, key_id=1)
    entry = PoolEntry(guessed_key, derive_permutation(guessed_key, defended.block_size), pair)
    return DefendedClassifier(backbone.config, backbone.backbone, [entry], defended.block_size)


def scenario2_transfer(
    backbone: IsotropicNet,
    guessed_key: SecretKey,
    defended: DefendedClassifier,
    trainset: DatasetContainer,
    testset: DatasetContainer,
    config: AttackConfig,
    train_config: Optional[TrainConfig] = None,
    allow_pool_key: bool = False,
    batch_size: int = 64,
    clean_accuracy: Optional[float] = None,
    surrogate: Optional[DefendedClassifier] = None,
) -> ArmResult:
    """PGD through the attacker's own guessed-key shuffle, replayed on the defense.

    ``allow_pool_key`` permits the true-key control arm; otherwise a guessed key
    equal to a pool key raises :class:`PoolKeyCollision`.
    """

    started = time.perf_counter()
    if surrogate is None:
        surrogate = guessed_key_model(
            backbone, guessed_key, defended, trainset, train_config or TrainConfig(), allow_pool_key
        )
    elif not allow_pool_key:
        _check_disjoint(surrogate.keys, defended)
    images, labels = testset.tensors()
    forward = lambda x: surrogate.keyed_logits(x, 1)  # noqa: E731
    adv = attack_in_batches(
        lambda x, y, stream: pgd(forward, x, y, config, stream=stream), images, labels, config, batch_size
    )
    if clean_accuracy is None:
        clean_accuracy = defended_accuracy(defended, testset)
    colliding = guessed_key.seed in {key.seed for key in defended.keys}
    result = ArmResult(
        arm="scenario2",
        norm=config.norm,
        epsilon=config.epsilon,
        steps=config.steps,
        key_mode="true-key" if colliding else "guessed-key",
        pool_size=defended.size,
        examples=adv.count,
        clean_accuracy=clean_accuracy,
        robust_accuracy=defended_accuracy(defended, (adv.perturbed, labels)),
        surrogate_clean_accuracy=accuracy(lambda b: kernels.predicted_labels(forward(b)), testset),
        surrogate_robust_accuracy=accuracy(lambda b: kernels.predicted_labels(forward(b)), (adv.perturbed, labels)),
        zero_gradient_steps=adv.zero_gradient_steps,
        seconds=time.perf_counter() - started,
    )
    _LOGGER.info("scenario2 %s: defended robust %.3f", config.describe(), result.robust_accuracy)
    return result


def build_attacker_pool(
    backbone: IsotropicNet,
    keys: Sequence[SecretKey],
    defended: DefendedClassifier,
    trainset: DatasetContainer,
    train_config: TrainConfig,
    allow_pool_key: bool = False,
    workers: int = 1,
) -> DefendedClassifier:
    """Fine-tune an attacker-side pool exactly the way the defender built theirs."""

    if not allow_pool_key:
        _check_disjoint(keys, defended)
    return build_defense(
        backbone, keys, trainset, train_config, block_size=defended.block_size, workers=workers
    )


def eot_objective(pool: DefendedClassifier, labels: torch.Tensor, config: AttackConfig) -> Objective:
    """Per-image loss averaged over every key of ``pool``."""

    per_key = [
        cross_entropy_objective(lambda x, index=index: pool.keyed_logits(x, index), labels, config)
        for index in range(1, pool.size + 1)
    ]

    def objective(x: torch.Tensor) -> torch.Tensor:
        total = per_key[0](x)
        for loss in per_key[1:]:
            total = total + loss(x)
        return total / len(per_key)

    return objective


def _pool_success(pool: DefendedClassifier, labels: torch.Tensor, config: AttackConfig):
    def succeeded(x: torch.Tensor) -> torch.Tensor:
        flags = []
        for index in range(1, pool.size + 1):
            predicted = kernels.predicted_labels(pool.keyed_logits(x, index))
            flags.append(predicted != labels if config.targeted is None else predicted == config.targeted)
        return torch.stack(flags).all(dim=0)

    return succeeded


def eot_attack(
    attacker_pool: DefendedClassifier, x: torch.Tensor, y: torch.Tensor, config: AttackConfig, stream: str = ""
) -> AdvExample:
    """PGD on the key-averaged loss of ``attacker_pool``."""

    x = x.detach()
    perturbed, zero_steps = ascend(
        eot_objective(attacker_pool, y, config), x, config, _pool_success(attacker_pool, y, config), stream=stream
    )
    return AdvExample(x, perturbed, y, config, zero_steps)


def white_box_attack(
    defended: DefendedClassifier, x: torch.Tensor, y: torch.Tensor, config: AttackConfig, stream: str = ""
) -> AdvExample:
    """Control arm: EoT over the defender's own keys and pairs."""

    return eot_attack(defended, x, y, config, stream=stream)


def _selected_arm(
    arm: str,
    key_mode: str,
    attacker: DefendedClassifier,
    defended: DefendedClassifier,
    testset: DatasetContainer,
    selection: Selection,
    config: AttackConfig,
    batch_size: int,
    clean_accuracy: Optional[float],
    attacker_pool_size: Optional[int],
) -> ArmResult:
    started = time.perf_counter()
    images, labels = selection.apply(testset).tensors()
    adv = attack_in_batches(
        lambda x, y, stream: eot_attack(attacker, x, y, config, stream=stream), images, labels, config, batch_size
    )
    success = attack_success_rate(defended, adv, selection)
    result = ArmResult(
        arm=arm,
        norm=config.norm,
        epsilon=config.epsilon,
        steps=config.steps,
        key_mode=key_mode,
        pool_size=defended.size,
        attacker_pool_size=attacker_pool_size,
        examples=adv.count,
        clean_accuracy=clean_accuracy,
        robust_accuracy=defended_accuracy(defended, (adv.perturbed, labels)),
        asr=success.expected,
        asr_single_draw=success.single_draw,
        zero_gradient_steps=adv.zero_gradient_steps,
        seconds=time.perf_counter() - started,
    )
    _LOGGER.info("%s %s: ASR %.3f (single draw %.3f)", result.label, config.describe(), result.asr, result.asr_single_draw)
    return result


def white_box_arm(
    defended: DefendedClassifier,
    testset: DatasetContainer,
    selection: Selection,
    config: AttackConfig,
    batch_size: int = 64,
    clean_accuracy: Optional[float] = None,
) -> ArmResult:
    return _selected_arm(
        "white", "true-pool", defended, defended, testset, selection, config, batch_size, clean_accuracy, None
    )


def eot_arm(
    attacker_pool: DefendedClassifier,
    defended: DefendedClassifier,
    testset: DatasetContainer,
    selection: Selection,
    config: AttackConfig,
    batch_size: int = 64,
    clean_accuracy: Optional[float] = None,
) -> ArmResult:
    _check_disjoint(attacker_pool.keys, defended)
    return _selected_arm(
        "eot",
        "attacker-pool",
        attacker_pool,
        defended,
        testset,
        selection,
        config,
        batch_size,
        clean_accuracy,
        attacker_pool.size,
    )


__all__ = [
    "attack_in_batches",
    "build_attacker_pool",
    "eot_arm",
    "eot_attack",
    "eot_objective",
    "guessed_key_model",
    "scenario1_transfer",
    "scenario2_transfer",
    "white_box_arm",
    "white_box_attack",
]
