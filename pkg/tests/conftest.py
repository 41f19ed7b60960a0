from __future__ import annotations

import pytest
import torch

from keyshield.defense import TrainConfig, build_defense, pretrain_backbone, save_defense
from keyshield.evaluation import save_dataset, synthesize_dataset
from keyshield.model import ModelConfig, save_model
from keyshield.transform import generate_keys, save_key_file


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(hidden_dim=8, depth=2, patch_size=4, kernel_size=3, num_classes=10, image_side=16)


@pytest.fixture(scope="session")
def toy_data():
    return synthesize_dataset(200, seed=1, side=16)


@pytest.fixture(scope="session")
def toy_test():
    return synthesize_dataset(60, seed=2, side=16)


@pytest.fixture(scope="session")
def trained_tiny(tiny_config, toy_data):
    config = TrainConfig(learning_rate=0.05, epochs=8, batch_size=32, seed=3)
    return pretrain_backbone(toy_data, config, tiny_config)


@pytest.fixture(scope="session")
def pool_keys():
    return generate_keys(3, seed=11)


@pytest.fixture(scope="session")
def tiny_defense(trained_tiny, pool_keys, toy_data):
    config = TrainConfig(learning_rate=0.05, epochs=2, batch_size=32, seed=4)
    return build_defense(trained_tiny, pool_keys, toy_data, config, sampler_seed=9)


@pytest.fixture(scope="session")
def saved_defense(tmp_path_factory, trained_tiny, tiny_defense, pool_keys, toy_data, toy_test):
    """A manifest on disk with ``train`` and ``test`` datasets beside it."""

    root = tmp_path_factory.mktemp("defense")
    save_model(root / "model", trained_tiny)
    save_key_file(root / "keys.txt", pool_keys)
    manifest = save_defense(tiny_defense, root, root / "keys.txt", root / "model")
    save_dataset(root / "train", toy_data)
    save_dataset(root / "test", toy_test)
    return manifest
