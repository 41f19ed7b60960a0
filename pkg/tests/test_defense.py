from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from keyshield.defense import (
    TrainConfig,
    build_defense,
    defended_predict,
    defended_predict_batch,
    finetune_pair,
    load_defense,
    load_plain_model,
    predict_with_key,
    pretrain_backbone,
)
from keyshield.defense.classifier import KeySampler
from keyshield.defense.manifest_store import load_manifest, manifest_hash
from keyshield.errors import (
    ConfigError,
    DataError,
    DimensionError,
    DuplicateKeyError,
    FormatError,
    KeyIndexError,
)
from keyshield.evaluation import empty_dataset
from keyshield.model import backbone_checksum, init_model
from keyshield.transform import SecretKey, SplitMix64, generate_keys, shuffle_tensor
from keyshield.transform.keys import derive_permutation


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).require_effective()
    assert TrainConfig(epochs=0).epochs == 0


def test_pretraining_fits_the_plain_data(trained_tiny, toy_data):
    images, labels = toy_data.tensors()
    with torch.no_grad():
        predicted = trained_tiny(images).argmax(dim=1)
    assert (predicted == labels).float().mean().item() > 0.2


def test_pretrain_writes_checkpoint_and_record(tmp_path, tiny_config, toy_data):
    config = TrainConfig(learning_rate=0.05, epochs=1, batch_size=50, seed=0)
    pretrain_backbone(toy_data.head(50), config, tiny_config, checkpoint_dir=tmp_path / "net")
    record = json.loads((tmp_path / "net" / "training.json").read_text(encoding="utf-8"))
    assert record["phase"] == "pretrain"
    assert record["examples"] == 50
    assert 0.0 <= record["train_accuracy"] <= 1.0


def test_empty_dataset_is_rejected(trained_tiny, tiny_config):
    empty = empty_dataset(16, 16)
    with pytest.raises(DataError):
        pretrain_backbone(empty, TrainConfig(), tiny_config)
    with pytest.raises(DataError):
        finetune_pair(trained_tiny, SecretKey(seed=1), empty, TrainConfig())


def test_building_the_pool_keeps_the_backbone(tiny_defense, trained_tiny, pool_keys):
    assert tiny_defense.size == 3
    assert tiny_defense.keys == pool_keys
    assert tiny_defense.backbone is trained_tiny.backbone
    assert all(not parameter.requires_grad for parameter in tiny_defense.backbone.parameters())
    for index in range(1, 4):
        assert tiny_defense.model(index).backbone is tiny_defense.backbone
        assert tiny_defense.entry(index).pair.key_id == index


def test_finetune_leaves_backbone_bit_identical(trained_tiny, toy_data):
    before = backbone_checksum(trained_tiny.backbone)
    pair = finetune_pair(trained_tiny, SecretKey(seed=5), toy_data.head(64), TrainConfig(epochs=1, batch_size=32), key_id=1)
    assert backbone_checksum(trained_tiny.backbone) == before
    assert pair.checksum() != trained_tiny.pair.checksum()


@pytest.mark.parametrize("config", [TrainConfig(learning_rate=0.0, epochs=2), TrainConfig(epochs=0)])
def test_no_op_schedules_return_the_pretrained_pair(trained_tiny, toy_data, config):
    pair = finetune_pair(trained_tiny, SecretKey(seed=5), toy_data.head(32), config, key_id=1)
    assert pair.checksum() == trained_tiny.pair.checksum()


def test_misaligned_block_size(trained_tiny, toy_data):
    with pytest.raises(DimensionError):
        finetune_pair(trained_tiny, SecretKey(seed=5), toy_data.head(8), TrainConfig(epochs=0), block_size=2)
    pair = finetune_pair(
        trained_tiny, SecretKey(seed=5), toy_data.head(8), TrainConfig(epochs=0), block_size=2, allow_misaligned=True
    )
    assert pair.checksum() == trained_tiny.pair.checksum()


def test_duplicate_keys_are_rejected(trained_tiny, toy_data):
    with pytest.raises(DuplicateKeyError):
        build_defense(trained_tiny, [SecretKey(seed=3), SecretKey(seed=3)], toy_data, TrainConfig(epochs=0))


def test_refreshing_statistics_stays_off_the_shared_backbone(trained_tiny, toy_data):
    before = backbone_checksum(trained_tiny.backbone)
    config = TrainConfig(learning_rate=0.05, epochs=1, batch_size=32, refresh_backbone_stats=True)
    defense = build_defense(trained_tiny, generate_keys(2, seed=40), toy_data.head(64), config)
    assert backbone_checksum(trained_tiny.backbone) == before
    assert defense.entry(1).pair.backbone_stats
    assert defense.model(1).backbone is not trained_tiny.backbone


def test_forced_key_matches_manual_shuffle(tiny_defense, toy_test):
    images, _ = toy_test.head(4).tensors()
    perm = derive_permutation(tiny_defense.keys[1], tiny_defense.block_size)
    with torch.no_grad():
        expected = tiny_defense.model(2)(shuffle_tensor(images, perm))
    torch.testing.assert_close(predict_with_key(tiny_defense, images, 2), expected)
    with pytest.raises(KeyIndexError):
        predict_with_key(tiny_defense, images, 0)
    with pytest.raises(KeyIndexError):
        predict_with_key(tiny_defense, images, 4)


def test_sampler_is_uniform():
    defense_size = 5
    draws = np.array(KeySampler(SplitMix64(1), defense_size).draws(10000))
    assert draws.min() == 1 and draws.max() == defense_size
    frequencies = np.bincount(draws, minlength=defense_size + 1)[1:] / draws.size
    assert np.all(np.abs(frequencies - 0.2) <= 0.04)


def test_defended_predict_replays_with_the_same_stream(tiny_defense, toy_test):
    images, _ = toy_test.head(20).tensors()
    labels, indices = defended_predict_batch(tiny_defense, images, tiny_defense.sampler("replay"))
    again, again_indices = defended_predict_batch(tiny_defense, images, tiny_defense.sampler("replay"))
    assert torch.equal(labels, again) and torch.equal(indices, again_indices)
    assert set(indices.tolist()) <= {1, 2, 3}
    for position in range(20):
        forced = predict_with_key(tiny_defense, images[position], int(indices[position]))
        assert int(forced.argmax()) == int(labels[position])

    label, index = defended_predict(tiny_defense, toy_test.images[0])
    assert 1 <= index <= 3 and 0 <= label < 10
    with pytest.raises(DimensionError):
        defended_predict(tiny_defense, images[:2])


def test_truncated_pool(tiny_defense):
    first = tiny_defense.truncated(1)
    assert first.size == 1 and first.keys == tiny_defense.keys[:1]
    with pytest.raises(ConfigError):
        tiny_defense.truncated(4)


def test_saved_defense_roundtrip(saved_defense, tiny_defense, toy_test):
    manifest = load_manifest(saved_defense)
    assert manifest.n == 3 and manifest.block_size == 4 and manifest.sampler_seed == 9
    assert not manifest.key_file.startswith("/")

    loaded = load_defense(saved_defense)
    assert loaded.keys == tiny_defense.keys
    assert backbone_checksum(loaded.backbone) == backbone_checksum(tiny_defense.backbone)
    images, _ = toy_test.head(6).tensors()
    for index in (1, 2, 3):
        torch.testing.assert_close(predict_with_key(loaded, images, index), predict_with_key(tiny_defense, images, index))
    a, _ = defended_predict_batch(loaded, images, loaded.sampler("eval"))
    b, _ = defended_predict_batch(tiny_defense, images, tiny_defense.sampler("eval"))
    assert torch.equal(a, b)

    plain = load_plain_model(saved_defense)
    assert plain.key_id is None and not plain.training
    assert len(manifest_hash(saved_defense)) == 40


def test_short_key_file_and_broken_manifest(tmp_path, saved_defense):
    manifest = load_manifest(saved_defense)
    root = saved_defense.parent
    (tmp_path / "keys.txt").write_text((root / manifest.key_file).read_text(encoding="utf-8").splitlines()[0] + "\n")
    data = manifest.model_copy(
        update={
            "key_file": str(tmp_path / "keys.txt"),
            "pair_paths": [str(root / path) for path in manifest.pair_paths],
            "backbone_path": str(root / manifest.backbone_path),
            "plain_pair_path": str(root / manifest.plain_pair_path),
            "model_config_path": str(root / manifest.model_config_path),
        }
    )
    (tmp_path / "defense.manifest").write_text(data.model_dump_json(), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_defense(tmp_path / "defense.manifest")

    (tmp_path / "broken.manifest").write_text("{not json", encoding="utf-8")
    with pytest.raises(FormatError):
        load_defense(tmp_path / "broken.manifest")


def test_pretraining_is_deterministic_in_its_seed(tmp_path, tiny_config, toy_data):
    config = TrainConfig(learning_rate=0.05, epochs=1, batch_size=50, seed=6)
    pretrain_backbone(toy_data.head(100), config, tiny_config, checkpoint_dir=tmp_path / "a")
    pretrain_backbone(toy_data.head(100), config, tiny_config, checkpoint_dir=tmp_path / "b")
    for name in ("backbone.bin", "pair_plain.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_learning_rate_pretraining_keeps_the_initialization(tiny_config, toy_data):
    config = TrainConfig(learning_rate=0.0, epochs=1, batch_size=50, seed=6)
    model = pretrain_backbone(toy_data.head(100), config, tiny_config)
    fresh = init_model(tiny_config, SplitMix64(6).split("init").next_u64())
    trained = dict(model.named_parameters())
    for name, value in fresh.named_parameters():
        assert torch.equal(trained[name], value), name
