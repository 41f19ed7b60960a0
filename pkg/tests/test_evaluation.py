from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from keyshield.attacks.metrics import forced_key_predictions
from keyshield import cli
from keyshield.cli import EXIT_CONFIG, EXIT_FORMAT, EXIT_OK, attack_config, build_parser, exit_code, main
from keyshield.defense import load_defense, save_defense
from keyshield.errors import ConfigError, EmptySelection, FormatError, LabelError, StageError
from keyshield.evaluation import (
    ArmResult,
    DatasetContainer,
    EvalReport,
    ExperimentConfig,
    accuracy,
    load_dataset,
    load_report,
    render_csv,
    render_table,
    save_dataset,
    synthesize_dataset,
    write_report,
)
from keyshield.evaluation.experiment import run_experiment
from keyshield.model import save_model
from keyshield.transform import load_key_file, save_key_file


def test_dataset_roundtrip(tmp_path):
    dataset = synthesize_dataset(12, seed=4, side=8)
    save_dataset(tmp_path / "set", dataset)
    loaded = load_dataset(tmp_path / "set", num_classes=10)
    assert np.array_equal(loaded.images, dataset.images)
    assert np.array_equal(loaded.labels, dataset.labels)


def test_truncated_container_is_rejected(tmp_path):
    save_dataset(tmp_path / "set", synthesize_dataset(4, side=8))
    path = tmp_path / "set" / "images.bin"
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError, match="expected .* found"):
        load_dataset(tmp_path / "set")


def test_bad_magic_and_label_mismatch(tmp_path):
    save_dataset(tmp_path / "set", synthesize_dataset(4, side=8))
    path = tmp_path / "set" / "images.bin"
    payload = path.read_bytes()
    path.write_bytes(b"XXIMG1" + payload[6:])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "set")

    path.write_bytes(payload)
    (tmp_path / "set" / "labels.txt").write_text("1\n2\n", encoding="utf-8")
    with pytest.raises(LabelError):
        load_dataset(tmp_path / "set")

    (tmp_path / "set" / "labels.txt").write_text("1\n2\n3\n11\n", encoding="utf-8")
    with pytest.raises(LabelError):
        load_dataset(tmp_path / "set", num_classes=10)


def test_accuracy_of_oracle_and_constant_predictors():
    dataset = synthesize_dataset(50, seed=6, side=8)
    images, labels = dataset.tensors()
    lookup = {images[i].numpy().tobytes(): int(labels[i]) for i in range(50)}
    oracle = lambda batch: torch.tensor([lookup[image.numpy().tobytes()] for image in batch])  # noqa: E731
    assert accuracy(oracle, dataset, batch_size=16) == 1.0
    assert accuracy(lambda batch: torch.zeros(batch.shape[0], dtype=torch.long), dataset) == pytest.approx(0.1)
    with pytest.raises(EmptySelection):
        accuracy(oracle, dataset.head(0))


def test_synthetic_data_is_deterministic_and_balanced():
    first, second = synthesize_dataset(40, seed=9, side=16), synthesize_dataset(40, seed=9, side=16)
    assert np.array_equal(first.images, second.images)
    assert np.array_equal(first.labels, second.labels)
    assert np.bincount(first.labels, minlength=10).tolist() == [4] * 10
    assert not np.array_equal(first.images, synthesize_dataset(40, seed=10, side=16).images)
    with pytest.raises(ConfigError):
        synthesize_dataset(4, side=4)


def _clean_report() -> EvalReport:
    return EvalReport(
        manifest_hash="abc123",
        config=ExperimentConfig(arms=["clean"]),
        arms=[ArmResult(arm="clean", key_mode="sampled", pool_size=5, examples=100, clean_accuracy=0.875, seconds=1.5)],
        timing={"clean": 1.5},
    )


def test_report_csv_and_table(tmp_path):
    report = _clean_report()
    assert render_csv(report) == "arm,norm,eps,metric,value\nclean/pool=5,none,0.000000,clean_accuracy,0.875000\n"
    table = render_table(report)
    assert "clean/pool=5" in table and "manifest abc123" in table and "PARTIAL" not in table

    json_path, csv_path = write_report(report, tmp_path / "out")
    assert json_path.name == "report.json" and csv_path.read_text(encoding="utf-8") == render_csv(report)
    assert load_report(tmp_path / "out") == report

    json_path, csv_path = write_report(report, tmp_path / "named.json")
    assert csv_path == tmp_path / "named.csv"


def test_partial_report_table():
    report = _clean_report().model_copy(update={"partial": True, "failed_stage": "white", "error": "boom"})
    assert render_table(report).splitlines()[-3] == "PARTIAL: stage 'white' failed: boom"


def test_experiment_config_orders_arms():
    config = ExperimentConfig(arms=["eot", "clean", "white"])
    assert config.arms == ["clean", "white", "eot"]
    assert config.epsilon("l2") == 0.5
    with pytest.raises(ValueError):
        ExperimentConfig(eot_pool_sizes=[0])


def test_clean_experiment_is_reproducible(tmp_path, saved_defense):
    config = ExperimentConfig(seed=3, arms=["clean"], pool_sizes=[1, 3])
    first = run_experiment(saved_defense, config, out_dir=tmp_path / "a")
    second = run_experiment(saved_defense, config, out_dir=tmp_path / "b")
    assert [result.label for result in first.arms] == ["clean/pool=1", "clean/pool=3"]
    assert first.clean_accuracy == first.arms[1].clean_accuracy
    assert not first.partial
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    assert len(render_csv(first).splitlines()) == 3
    assert set(first.timing) >= {"load", "clean", "emit"}


def test_failed_stage_writes_partial_report(tmp_path, saved_defense):
    config = ExperimentConfig(arms=["clean"], test_dir="missing")
    with pytest.raises(StageError) as info:
        run_experiment(saved_defense, config, out_dir=tmp_path / "out")
    assert info.value.stage == "load"
    assert isinstance(info.value.cause, FormatError)
    assert exit_code(info.value) == EXIT_FORMAT
    written = load_report(tmp_path / "out")
    assert written.partial and written.failed_stage == "load"
    assert info.value.report == written

    with pytest.raises(StageError):
        run_experiment(tmp_path / "absent.manifest", config)


def test_pool_larger_than_manifest_is_a_config_error(saved_defense):
    with pytest.raises(StageError) as info:
        run_experiment(saved_defense, ExperimentConfig(arms=["clean"], pool_sizes=[4]))
    assert isinstance(info.value.cause, ConfigError)
    assert exit_code(info.value) == EXIT_CONFIG


def test_cli_dataset_and_keys(tmp_path, capsys):
    assert main(["synthesize-dataset", "--count", "20", "--side", "8", "--seed", "1", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert load_dataset(tmp_path / "d").count == 20
    assert main(["keygen", "--n", "4", "--seed", "2", "--out", str(tmp_path / "keys.txt")]) == EXIT_OK
    assert len(load_key_file(tmp_path / "keys.txt")) == 4

    assert main(
        ["encrypt", "--in", str(tmp_path / "d"), "--key-file", str(tmp_path / "keys.txt"),
         "--key-index", "2", "--out", str(tmp_path / "enc")]
    ) == EXIT_OK
    assert load_dataset(tmp_path / "enc").count == 20

    (tmp_path / "bad.txt").write_text("banana\n", encoding="utf-8")
    code = main(
        ["encrypt", "--data", str(tmp_path / "d"), "--key-file", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "x")]
    )
    assert code == EXIT_FORMAT

    code = main(["pretrain", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "m"), "--lr", "0"])
    assert code == EXIT_CONFIG


def test_cli_predict_evaluate_and_report(tmp_path, saved_defense, capsys):
    data = saved_defense.parent / "test"
    assert main(["predict", "--manifest", str(saved_defense), "--data", str(data), "--index", "3", "--force-key", "2"]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("key 2")

    (tmp_path / "exp.json").write_text(json.dumps({"arms": ["clean"]}), encoding="utf-8")
    assert main(
        ["evaluate", "--manifest", str(saved_defense), "--config", str(tmp_path / "exp.json"), "--out", str(tmp_path / "r")]
    ) == EXIT_OK
    assert "clean/pool=3" in capsys.readouterr().out

    assert main(["report", "--input", str(tmp_path / "r"), "--csv", str(tmp_path / "copy")]) == EXIT_OK
    assert (tmp_path / "copy" / "report.csv").read_text() == (tmp_path / "r" / "report.csv").read_text()


def test_container_rejects_bad_shapes():
    with pytest.raises(FormatError):
        DatasetContainer(np.zeros((2, 8, 8), dtype=np.uint8), np.zeros(2, dtype=np.int64))
    with pytest.raises(LabelError):
        DatasetContainer(np.zeros((2, 3, 8, 8), dtype=np.uint8), np.zeros(3, dtype=np.int64))


@pytest.mark.parametrize(
    "flags, expected",
    [
        (["--norm", "linf"], 8 / 255),
        (["--norm", "l2"], 0.5),
        (["--norm", "l2", "--eps", "0.5"], 0.5),
        (["--norm", "linf", "--eps", "0.03"], 0.03),
        (["--eps-numerator", "4", "--eps-denominator", "225"], 4 / 225),
    ],
)
def test_attack_budget_is_in_pixel_units(flags, expected):
    args = build_parser().parse_args(["attack", *flags, "--manifest", "defense.manifest", "--out", "report.json"])
    assert attack_config(args).epsilon == pytest.approx(expected)


def test_attack_budget_forms_are_exclusive():
    args = build_parser().parse_args(
        ["attack", "--eps", "0.1", "--eps-numerator", "8", "--manifest", "defense.manifest", "--out", "r.json"]
    )
    with pytest.raises(ConfigError):
        attack_config(args)


def test_cli_finetune_builds_a_loadable_pool(tmp_path, saved_defense):
    root = saved_defense.parent
    code = main(
        ["finetune", "--model", str(root / "model"), "--data", str(root / "train"), "--keys", str(root / "keys.txt"),
         "--n", "2", "--epochs", "1", "--lr", "0.05", "--batch-size", "50", "--seed", "3", "--out", str(tmp_path / "pool")]
    )
    assert code == EXIT_OK
    defended = load_defense(tmp_path / "pool" / "defense.manifest")
    assert defended.size == 2
    assert defended.keys == load_key_file(root / "keys.txt")[:2]


@pytest.fixture
def single_key_manifest(tmp_path, trained_tiny, tiny_defense, pool_keys, toy_test):
    """A one-key defense whose test set carries that key's own predictions."""

    single = tiny_defense.truncated(1)
    root = tmp_path / "single"
    save_model(root / "model", trained_tiny)
    save_key_file(root / "keys.txt", pool_keys[:1])
    manifest = save_defense(single, root, root / "keys.txt", root / "model")
    images, _ = toy_test.tensors()
    labels = forced_key_predictions(single, images)[:, 0]
    save_dataset(root / "test", DatasetContainer(toy_test.images, labels.numpy().astype(np.int64)))
    return manifest


def test_cli_attack_writes_report_and_adv_set(tmp_path, single_key_manifest, capsys):
    code = main(
        ["attack", "--method", "fgsm", "--norm", "linf", "--eps", "0.03", "--steps", "1", "--scenario", "1",
         "--manifest", str(single_key_manifest), "--out", str(tmp_path / "report.json"),
         "--adv-out", str(tmp_path / "adv")]
    )
    assert code == EXIT_OK
    assert "scenario1" in capsys.readouterr().out
    (result,) = load_report(tmp_path / "report.json").arms
    assert result.arm == "scenario1"
    assert result.epsilon == pytest.approx(0.03)
    assert result.examples == 60
    assert result.clean_accuracy >= 0.95
    assert (tmp_path / "report.csv").exists()
    assert load_dataset(tmp_path / "adv").count == 60


def test_cli_finetune_workers_default_to_thread_setting(tmp_path, saved_defense, monkeypatch):
    seen = {}

    def recording_build(*args, **kwargs):
        seen["workers"] = kwargs["workers"]
        raise ConfigError("stop after argument handling")

    threads = torch.get_num_threads()
    monkeypatch.setenv("KS_THREADS", "2")
    monkeypatch.setattr(cli, "build_defense", recording_build)
    root = saved_defense.parent
    code = main(
        ["finetune", "--model", str(root / "model"), "--data", str(root / "train"), "--keys", str(root / "keys.txt"),
         "--n", "1", "--out", str(tmp_path / "pool")]
    )
    torch.set_num_threads(threads)
    assert code == EXIT_CONFIG
    assert seen["workers"] == 2


def test_finetuning_defaults_to_ten_epochs():
    assert ExperimentConfig().finetune_epochs == 10
    args = build_parser().parse_args(["finetune", "--model", "m", "--keys", "keys.txt", "--out", "o"])
    assert args.epochs == 10
    assert args.key_file.name == "keys.txt"
