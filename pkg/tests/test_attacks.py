from __future__ import annotations

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from keyshield.attacks import (
    AdvExample,
    AttackConfig,
    Selection,
    attack_success_rate,
    budget,
    eot_attack,
    eot_objective,
    fgsm,
    guessed_key_model,
    pgd,
    scenario1_transfer,
    scenario2_transfer,
    select_correct,
    white_box_arm,
)
from keyshield.attacks.config import perturbation_norms
from keyshield.attacks.metrics import defended_accuracy, forced_key_predictions
from keyshield.attacks.store import load_adv_set, quantize, save_adv_set
from keyshield.autodiff import finite_diff_check
from keyshield.defense import TrainConfig
from keyshield.errors import ConfigError, EmptySelection, FormatError, NumericalError, PoolKeyCollision
from keyshield.evaluation import AdvSetMetadata, DatasetContainer
from keyshield.transform import SecretKey


def _linear_two_class(weight: torch.Tensor):
    """Logits ``[0, w . x]`` per image."""

    def forward(x: torch.Tensor) -> torch.Tensor:
        score = (x.reshape(x.shape[0], -1) * weight.reshape(1, -1)).sum(dim=1)
        return torch.stack([torch.zeros_like(score), score], dim=1)

    return forward


def _weights(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed))


@pytest.fixture(scope="module")
def single_key(tiny_defense):
    return tiny_defense.truncated(1)


@pytest.fixture(scope="module")
def agreeing_set(single_key, toy_test):
    """The test images relabeled with key 1's own predictions."""

    images, _ = toy_test.tensors()
    labels = forced_key_predictions(single_key, images)[:, 0]
    return DatasetContainer(toy_test.images, labels.numpy().astype(np.int64))


def test_budget_and_config_validation():
    assert budget(8) == pytest.approx(8 / 255)
    assert budget(8, 225) == pytest.approx(8 / 225)
    with pytest.raises(ConfigError):
        budget(8, 0)
    for bad in ({"epsilon": -0.1}, {"epsilon": 1.5}, {"steps": 0}, {"step_size": 0.0}, {"restarts": 0}, {"norm": "l1"}):
        with pytest.raises(ConfigError):
            AttackConfig(**bad)
    assert AttackConfig(epsilon=0.04).effective_step == pytest.approx(0.01)
    assert AttackConfig(norm="l2", epsilon=0.5, steps=25).effective_step == pytest.approx(0.05)
    assert AttackConfig(random_start=False, restarts=5).effective_restarts == 1


def test_fgsm_on_linear_model_moves_along_weight_sign():
    weight = _weights(3, 4, 4)
    x = torch.rand(2, 3, 4, 4, generator=torch.Generator().manual_seed(1))
    y = torch.zeros(2, dtype=torch.long)
    config = AttackConfig(epsilon=0.1, random_start=False)
    adv = fgsm(_linear_two_class(weight), x, y, config)
    expected = (x + 0.1 * weight.sign()).clamp(0, 1)
    torch.testing.assert_close(adv.perturbed, expected)


def test_zero_budget_is_identity():
    weight = _weights(3, 4, 4)
    x = torch.rand(2, 3, 4, 4)
    y = torch.zeros(2, dtype=torch.long)
    config = AttackConfig(epsilon=0.0, steps=3, restarts=2)
    assert torch.equal(fgsm(_linear_two_class(weight), x, y, config).perturbed, x)
    assert torch.equal(pgd(_linear_two_class(weight), x, y, config).perturbed, x)


def test_single_full_step_pgd_equals_fgsm(single_key, toy_test):
    x, y = toy_test.head(8).tensors()
    forward = lambda batch: single_key.keyed_logits(batch, 1)  # noqa: E731
    eps = 8 / 255
    one_step = AttackConfig(epsilon=eps, steps=1, step_size=eps, random_start=False)
    assert torch.equal(pgd(forward, x, y, one_step).perturbed, fgsm(forward, x, y, one_step).perturbed)


@pytest.mark.parametrize("norm,epsilon", [("linf", 8 / 255), ("l2", 0.5)])
def test_pgd_respects_the_budget(single_key, toy_test, norm, epsilon):
    x, y = toy_test.head(8).tensors()
    config = AttackConfig(norm=norm, epsilon=epsilon, steps=5, restarts=2)
    adv = pgd(lambda batch: single_key.keyed_logits(batch, 1), x, y, config)
    assert float(perturbation_norms(x, adv.perturbed, norm).max()) <= epsilon + 1e-6
    assert adv.perturbed.min() >= 0 and adv.perturbed.max() <= 1


def test_robust_accuracy_does_not_rise_with_the_budget(trained_tiny, toy_test):
    x, y = toy_test.tensors()
    epsilon = 16 / 255
    accuracies = []
    for scale in (0.0, 0.5, 1.0):
        config = AttackConfig(epsilon=scale * epsilon, steps=10, restarts=2, seed=3)
        adv = pgd(trained_tiny, x, y, config)
        with torch.no_grad():
            accuracies.append(float((trained_tiny(adv.perturbed).argmax(dim=1) == y).double().mean()))
    assert accuracies == sorted(accuracies, reverse=True)
    assert accuracies[2] < accuracies[0]


def test_pgd_replays_and_streams_differ(single_key, toy_test):
    x, y = toy_test.head(4).tensors()
    forward = lambda batch: single_key.keyed_logits(batch, 1)  # noqa: E731
    config = AttackConfig(steps=2, restarts=2, seed=5)
    first = pgd(forward, x, y, config, stream="a").perturbed
    assert torch.equal(first, pgd(forward, x, y, config, stream="a").perturbed)
    assert not torch.equal(first, pgd(forward, x, y, config, stream="b").perturbed)


def test_l2_zero_gradient_updates_are_skipped_and_counted():
    def constant(x: torch.Tensor) -> torch.Tensor:
        return x.reshape(x.shape[0], -1)[:, :10] * 0.0

    x = torch.rand(2, 3, 4, 4)
    y = torch.zeros(2, dtype=torch.long)
    config = AttackConfig(norm="l2", epsilon=0.5, steps=3, random_start=False)
    adv = pgd(constant, x, y, config)
    assert adv.zero_gradient_steps == 6
    assert torch.equal(adv.perturbed, x)
    assert fgsm(constant, x, y, config).zero_gradient_steps == 2


def test_adv_example_enforces_budget_and_range():
    x = torch.full((1, 3, 2, 2), 0.5)
    y = torch.zeros(1, dtype=torch.long)
    with pytest.raises(NumericalError):
        AdvExample(x, x + 0.1, y, AttackConfig(epsilon=0.05))
    with pytest.raises(NumericalError):
        AdvExample(x, x + 0.6, y, AttackConfig(epsilon=1.0))
    with pytest.raises(NumericalError):
        AdvExample(x, x[:, :2], y, AttackConfig())


def test_targeted_attack_reaches_the_target():
    weight = _weights(10, 48, seed=2)
    forward = lambda x: x.reshape(x.shape[0], -1) @ weight.T  # noqa: E731
    x = torch.full((4, 3, 4, 4), 0.5)
    y = torch.zeros(4, dtype=torch.long)
    config = AttackConfig(epsilon=0.5, steps=20, targeted=3, random_start=False)
    adv = pgd(forward, x, y, config)
    assert torch.equal(forward(adv.perturbed).argmax(dim=1), torch.full((4,), 3))
    assert torch.equal(adv.loss_labels(), torch.full((4,), 3))
    with pytest.raises(ConfigError):
        pgd(forward, x, y, AttackConfig(targeted=12, random_start=False, steps=1))


def test_fgsm_loss_grows_with_the_budget():
    weight = _weights(3, 4, 4, seed=3)
    forward = _linear_two_class(weight)
    x = torch.full((1, 3, 4, 4), 0.5)
    y = torch.zeros(1, dtype=torch.long)
    losses = []
    for epsilon in (0.0, 0.01, 0.05, 0.2):
        adv = fgsm(forward, x, y, AttackConfig(epsilon=epsilon))
        losses.append(float(F.cross_entropy(forward(adv.perturbed), y)))
    assert losses == sorted(losses)
    assert losses[-1] > losses[0]


def test_single_key_eot_matches_surrogate_pgd(single_key, toy_test):
    x, y = toy_test.head(6).tensors()
    config = AttackConfig(steps=3, restarts=2, seed=1)
    eot = eot_attack(single_key, x, y, config, stream="batch:0")
    direct = pgd(lambda batch: single_key.keyed_logits(batch, 1), x, y, config, stream="batch:0")
    assert torch.equal(eot.perturbed, direct.perturbed)


def test_eot_gradient_matches_finite_differences(tiny_defense, toy_test):
    pool = tiny_defense.clone().to(torch.float64)
    x, y = toy_test.head(2).tensors(torch.float64)
    objective = eot_objective(pool, y, AttackConfig())
    assert finite_diff_check(lambda t: objective(t).sum(), x, sample=40, seed=3) < 1e-3


def test_pool_key_collision(trained_tiny, tiny_defense, toy_data):
    with pytest.raises(PoolKeyCollision) as info:
        guessed_key_model(trained_tiny, tiny_defense.keys[0], tiny_defense, toy_data, TrainConfig(epochs=0))
    assert isinstance(info.value, KeyError)


def test_selection_and_success_rates(single_key, agreeing_set):
    selection = select_correct(single_key, agreeing_set, 5, seed=2)
    assert selection.count == 5 and selection.candidates == agreeing_set.count
    assert list(selection.indices) == sorted(selection.indices)
    assert select_correct(single_key, agreeing_set, 5, seed=2) == selection

    x, y = selection.apply(agreeing_set).tensors()
    untouched = AdvExample(x, x.clone(), y, AttackConfig(epsilon=0.0))
    rate = attack_success_rate(single_key, untouched, selection)
    assert rate.expected == 0.0 and rate.single_draw == 0.0

    wrong = (y + 1) % 10
    flipped = AdvExample(x, x.clone(), wrong, AttackConfig(epsilon=0.0))
    rate = attack_success_rate(single_key, flipped, selection)
    assert rate.expected == 1.0 and rate.single_draw == 1.0

    with pytest.raises(ConfigError):
        attack_success_rate(single_key, AdvExample(x[:2], x[:2], y[:2], AttackConfig()), selection)


def test_expected_rate_averages_over_forced_keys(tiny_defense, toy_test):
    x, _ = toy_test.head(10).tensors()
    forced = forced_key_predictions(tiny_defense, x)
    labels = forced[:, 0]
    adv = AdvExample(x, x.clone(), labels, AttackConfig(epsilon=0.0))
    selection = Selection(tuple(range(10)), 10, 10, 0)
    rate = attack_success_rate(tiny_defense, adv, selection)
    expected = float((forced != labels.unsqueeze(1)).double().mean())
    assert rate.expected == pytest.approx(expected)


def test_selection_without_candidates(single_key, agreeing_set):
    impossible = DatasetContainer(agreeing_set.images, (agreeing_set.labels + 1) % 10)
    with pytest.raises(EmptySelection):
        select_correct(single_key, impossible, 3)


def test_clean_and_unperturbed_accuracy_agree(tiny_defense, toy_test):
    images, labels = toy_test.tensors()
    assert defended_accuracy(tiny_defense, toy_test) == defended_accuracy(tiny_defense, (images.clone(), labels))


def test_transfer_scenarios_report_their_arms(trained_tiny, tiny_defense, toy_data, toy_test):
    testset = toy_test.head(12)
    config = AttackConfig(steps=2, restarts=1)
    first = scenario1_transfer(trained_tiny, tiny_defense, testset, config)
    assert first.arm == "scenario1" and first.key_mode == "plain-surrogate"
    assert first.examples == 12 and first.pool_size == 3
    assert first.surrogate_clean_accuracy is not None

    second = scenario2_transfer(
        trained_tiny, SecretKey(seed=999), tiny_defense, toy_data.head(40), testset, config, TrainConfig(epochs=1)
    )
    assert second.key_mode == "guessed-key"
    true_key = scenario2_transfer(
        trained_tiny,
        tiny_defense.keys[0],
        tiny_defense,
        toy_data.head(40),
        testset,
        config,
        TrainConfig(epochs=0),
        allow_pool_key=True,
    )
    assert true_key.key_mode == "true-key"


def test_white_box_arm_on_selection(single_key, agreeing_set):
    selection = select_correct(single_key, agreeing_set, 4, seed=0)
    result = white_box_arm(single_key, agreeing_set, selection, AttackConfig(steps=2, restarts=1), clean_accuracy=1.0)
    assert result.arm == "white" and result.key_mode == "true-pool"
    assert result.examples == 4
    assert 0.0 <= result.asr <= 1.0 and result.asr_single_draw == result.asr


def test_quantized_adv_set_roundtrip(tmp_path, single_key, toy_test):
    x, y = toy_test.head(5).tensors()
    config = AttackConfig(steps=2, restarts=1)
    adv = pgd(lambda batch: single_key.keyed_logits(batch, 1), x, y, config)
    pixels = quantize(adv)
    offset = np.abs(pixels.astype(np.int64) - toy_test.images[:5].astype(np.int64))
    assert offset.max() <= 8

    metadata = AdvSetMetadata(method="pgd", norm="linf", epsilon=config.epsilon, steps=2, seed=0, scenario="white", count=5)
    save_adv_set(tmp_path / "adv", adv, metadata)
    dataset, loaded = load_adv_set(tmp_path / "adv")
    assert loaded == metadata
    assert np.array_equal(dataset.images, pixels)
    assert np.array_equal(dataset.labels, y.numpy())

    (tmp_path / "adv" / "adv.json").write_text(metadata.model_copy(update={"count": 4}).model_dump_json())
    with pytest.raises(FormatError):
        load_adv_set(tmp_path / "adv")
