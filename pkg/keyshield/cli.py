"""Command-line entry point: ``python -m keyshield <subcommand>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Iterable, Optional, Tuple

import cv2
import numpy as np
import torch

from .attacks.config import AdvExample, AttackConfig, budget
from .attacks.gradient import fgsm, pgd
from .attacks.metrics import attack_success_rate, defended_accuracy, select_correct
from .attacks.scenarios import attack_in_batches, build_attacker_pool, eot_attack, guessed_key_model
from .attacks.store import save_adv_set
from .config import Settings, configure_runtime, load_settings
from .defense.classifier import DefendedClassifier, build_defense, defended_predict, predict_with_key
from .defense.config import TrainConfig
from .defense.manifest_store import load_defense, load_plain_model, manifest_hash, save_defense
from .defense.training import pretrain_backbone
from .errors import ConfigError, FormatError, KeyShieldError, LabelError, StageError
from .evaluation.container import load_dataset, save_dataset
from .evaluation.report import load_report, render_table, write_report
from .evaluation.schemas import AdvSetMetadata, ArmResult, EvalReport, ExperimentConfig
from .evaluation.synthetic import synthesize_dataset
from .model.config import ModelConfig
from .model.store import load_model
from .transform.keys import SecretKey, generate_keys, load_key_file, save_key_file
from .transform.prng import SplitMix64
from .transform.shuffle import encrypt_dataset

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_CONFIG = 3
EXIT_FAILURE = 4


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        refresh_backbone_stats=getattr(args, "refresh_stats", False),
    ).require_effective()


def _cmd_synthesize(args: argparse.Namespace, settings: Settings) -> int:
    save_dataset(args.out, synthesize_dataset(args.count, seed=args.seed, side=args.side))
    return EXIT_OK


def _cmd_keygen(args: argparse.Namespace, settings: Settings) -> int:
    save_key_file(args.out, generate_keys(args.n, args.seed))
    _LOGGER.info("Wrote %d keys to %s", args.n, args.out)
    return EXIT_OK


def _key_at(path: Path, index: int) -> SecretKey:
    keys = load_key_file(path)
    if not 1 <= index <= len(keys):
        raise ConfigError(f"key index {index} outside 1..{len(keys)}")
    return keys[index - 1]


def _cmd_encrypt(args: argparse.Namespace, settings: Settings) -> int:
    dataset = load_dataset(args.data)
    key = _key_at(args.key_file, args.key_index)
    save_dataset(args.out, encrypt_dataset(dataset, key, args.block_size, workers=settings.workers))
    return EXIT_OK


def _cmd_pretrain(args: argparse.Namespace, settings: Settings) -> int:
    dataset = load_dataset(args.data or settings.data_dir / "train")
    model_config = ModelConfig(
        hidden_dim=args.hidden,
        depth=args.depth,
        patch_size=args.patch,
        kernel_size=args.kernel,
        num_classes=args.classes,
        image_side=dataset.height,
    )
    pretrain_backbone(dataset, _train_config(args), model_config, checkpoint_dir=args.out)
    return EXIT_OK


def _cmd_finetune(args: argparse.Namespace, settings: Settings) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.data or settings.data_dir / "train", model.config.num_classes)
    keys = load_key_file(args.key_file)
    if args.n > len(keys):
        raise ConfigError(f"--n {args.n} exceeds the {len(keys)} keys in {args.key_file}")
    defended = build_defense(
        model,
        keys[: args.n],
        dataset,
        _train_config(args),
        block_size=args.block_size,
        sampler_seed=args.seed,
        workers=args.workers if args.workers is not None else settings.workers,
        allow_misaligned=args.allow_misaligned,
    )
    save_defense(defended, args.out, args.key_file, args.model)
    return EXIT_OK


def _read_image(path: Path) -> np.ndarray:
    pixels = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if pixels is None:
        raise FormatError(f"Cannot decode image {path}")
    return np.ascontiguousarray(cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB).transpose(2, 0, 1))


def _cmd_predict(args: argparse.Namespace, settings: Settings) -> int:
    defended = load_defense(args.manifest, sampler_seed=args.seed)
    if args.image is not None:
        image = _read_image(args.image)
    else:
        dataset = load_dataset(args.data)
        if not 0 <= args.index < dataset.count:
            raise ConfigError(f"--index {args.index} outside 0..{dataset.count - 1}")
        image = dataset.images[args.index]
    if args.key_index is not None:
        logits = predict_with_key(defended, image, args.key_index)
        print(f"label {int(torch.argmax(logits))} key {args.key_index}")
    else:
        label, index = defended_predict(defended, image)
        print(f"label {label} key {index}")
    return EXIT_OK


def _craft(
    args: argparse.Namespace,
    config: AttackConfig,
    defended: DefendedClassifier,
    images: torch.Tensor,
    labels: torch.Tensor,
) -> Tuple[AdvExample, str, str, Optional[int]]:
    """Adversarial batch plus the arm, key mode and attacker pool size it represents."""

    train = TrainConfig(epochs=args.finetune_epochs, seed=SplitMix64(args.seed).split("train").next_u64())
    taken = {key.seed for key in defended.keys}
    rng = SplitMix64(args.seed).split("attacker")
    fresh = []
    while len(fresh) < max(1, args.attackers):
        seed = rng.next_u64()
        if seed not in taken:
            taken.add(seed)
            fresh.append(SecretKey(seed=seed))

    def single(forward) -> AdvExample:
        if args.method == "fgsm":
            run = lambda x, y, stream: fgsm(forward, x, y, config)  # noqa: E731
        else:
            run = lambda x, y, stream: pgd(forward, x, y, config, stream)  # noqa: E731
        return attack_in_batches(run, images, labels, config, args.batch_size)

    if args.scenario == "white":
        if args.method == "eot":
            adv = attack_in_batches(
                lambda x, y, stream: eot_attack(defended, x, y, config, stream), images, labels, config, args.batch_size
            )
            return adv, "white", "true-pool", None
        return single(lambda x: defended.keyed_logits(x, 1)), "white", "true-key", None

    plain = load_plain_model(args.manifest)
    if args.scenario == "1":
        if args.method == "eot":
            raise ConfigError("scenario 1 attacks the plain model; use --scenario 2 or white for eot")
        return single(plain), "scenario1", "plain-surrogate", None

    if args.train is None:
        raise ConfigError("scenario 2 needs --train for attacker fine-tuning")
    trainset = load_dataset(args.train, defended.config.num_classes)
    if args.method == "eot":
        attacker = build_attacker_pool(plain, fresh[: args.attackers], defended, trainset, train)
        adv = attack_in_batches(
            lambda x, y, stream: eot_attack(attacker, x, y, config, stream), images, labels, config, args.batch_size
        )
        return adv, "eot", "attacker-pool", attacker.size
    surrogate = guessed_key_model(plain, fresh[0], defended, trainset, train)
    return single(lambda x: surrogate.keyed_logits(x, 1)), "scenario2", "guessed-key", None


DEFAULT_EPSILON = {"linf": 8 / 255, "l2": 0.5}


def attack_epsilon(args: argparse.Namespace) -> float:
    """Budget in pixel units from ``--eps`` or ``--eps-numerator``/``--eps-denominator``."""

    if args.eps_numerator is not None:
        if args.eps is not None:
            raise ConfigError("give either --eps or --eps-numerator, not both")
        return budget(args.eps_numerator, args.eps_denominator)
    if args.eps is not None:
        return args.eps
    return DEFAULT_EPSILON[args.norm]


def attack_config(args: argparse.Namespace) -> AttackConfig:
    return AttackConfig(
        norm=args.norm,
        epsilon=attack_epsilon(args),
        steps=args.steps,
        step_size=args.step_size,
        random_start=not args.no_random_start,
        restarts=args.restarts,
        targeted=args.targeted,
        seed=args.seed,
    )


def _cmd_attack(args: argparse.Namespace, settings: Settings) -> int:
    config = attack_config(args)
    epsilon = config.epsilon
    if args.data is None:
        args.data = args.manifest.parent / "test"
    if args.train is None and (args.manifest.parent / "train").is_dir():
        args.train = args.manifest.parent / "train"
    defended = load_defense(args.manifest)
    config.check_target(defended.config.num_classes)
    testset = load_dataset(args.data, defended.config.num_classes)
    selection = select_correct(defended, testset, args.limit, seed=SplitMix64(args.seed).split("selection").next_u64())
    images, labels = selection.apply(testset).tensors()

    adv, arm, key_mode, attackers = _craft(args, config, defended, images, labels)
    success = attack_success_rate(defended, adv, selection)
    result = ArmResult(
        arm=arm,
        norm=config.norm,
        epsilon=config.epsilon,
        steps=config.steps,
        key_mode=key_mode,
        pool_size=defended.size,
        attacker_pool_size=attackers,
        examples=adv.count,
        clean_accuracy=defended_accuracy(defended, (images, labels)),
        robust_accuracy=defended_accuracy(defended, (adv.perturbed, labels)),
        asr=success.expected,
        asr_single_draw=success.single_draw,
        zero_gradient_steps=adv.zero_gradient_steps,
    )
    experiment = ExperimentConfig(
        seed=args.seed,
        arms=[arm],
        norms=[config.norm],
        steps=config.steps,
        restarts=config.restarts,
        random_start=config.random_start,
        targeted=config.targeted,
        selection_size=args.limit,
        test_dir=str(args.data),
        train_dir=str(args.train) if args.train else None,
        **({"linf_epsilon": epsilon} if config.norm == "linf" else {"l2_epsilon": epsilon}),
    )
    report = EvalReport(manifest_hash=manifest_hash(args.manifest), config=experiment, arms=[result])
    write_report(report, args.out)
    if args.adv_out is not None:
        metadata = AdvSetMetadata(
            method=args.method,
            norm=config.norm,
            epsilon=config.epsilon,
            steps=config.steps,
            seed=args.seed,
            scenario=args.scenario,
            count=adv.count,
            targeted=config.targeted,
        )
        save_adv_set(args.adv_out, adv, metadata)
    print(render_table(report), end="")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace, settings: Settings) -> int:
    from .evaluation.experiment import load_experiment_config, run_experiment

    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    report = run_experiment(args.manifest, config, out_dir=args.out, data_root=args.data_root)
    print(render_table(report), end="")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace, settings: Settings) -> int:
    report = load_report(args.input)
    if args.csv is not None:
        write_report(report, args.csv)
    print(render_table(report), end="")
    return EXIT_OK


def _add_training_flags(parser: argparse.ArgumentParser, epochs: int) -> None:
    parser.add_argument("--epochs", type=int, default=epochs)
    parser.add_argument("--lr", type=float, default=0.01, help="SGD learning rate")
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0, help="Master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keyshield", description="Key-based adversarial defense toolkit")
    parser.add_argument("--log-level", default=None, help="Python logging level (default KS_LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synthesize-dataset", help="Generate the 10-class toy dataset")
    synth.add_argument("--count", type=int, required=True)
    synth.add_argument("--side", type=int, default=32)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", type=Path, required=True)
    synth.set_defaults(handler=_cmd_synthesize)

    keygen = commands.add_parser("keygen", help="Write N distinct secret keys")
    keygen.add_argument("--n", type=int, required=True)
    keygen.add_argument("--seed", type=int, default=0)
    keygen.add_argument("--out", type=Path, required=True)
    keygen.set_defaults(handler=_cmd_keygen)

    encrypt = commands.add_parser("encrypt", help="Block-shuffle a dataset with one key")
    encrypt.add_argument("--in", "--data", dest="data", type=Path, required=True)
    encrypt.add_argument("--key-file", type=Path, required=True)
    encrypt.add_argument("--key-index", type=int, default=1, help="1-based line in the key file")
    encrypt.add_argument("--block-size", type=int, default=4)
    encrypt.add_argument("--out", type=Path, required=True)
    encrypt.set_defaults(handler=_cmd_encrypt)

    pretrain = commands.add_parser("pretrain", help="Train the plain classifier")
    pretrain.add_argument("--data", type=Path, default=None)
    pretrain.add_argument("--out", type=Path, required=True)
    pretrain.add_argument("--hidden", type=int, default=64)
    pretrain.add_argument("--depth", type=int, default=4)
    pretrain.add_argument("--patch", type=int, default=4)
    pretrain.add_argument("--kernel", type=int, default=5)
    pretrain.add_argument("--classes", type=int, default=10)
    _add_training_flags(pretrain, epochs=10)
    pretrain.set_defaults(handler=_cmd_pretrain)

    finetune = commands.add_parser("finetune", help="Fine-tune one pair per key and save the defense")
    finetune.add_argument("--model", type=Path, required=True)
    finetune.add_argument("--data", type=Path, default=None)
    finetune.add_argument("--keys", "--key-file", dest="key_file", type=Path, required=True)
    finetune.add_argument("--n", type=int, default=5, help="Pool size (first N keys)")
    finetune.add_argument("--block-size", type=int, default=None)
    finetune.add_argument("--allow-misaligned", action="store_true")
    finetune.add_argument("--refresh-stats", action="store_true", help="Re-estimate backbone statistics per key")
    finetune.add_argument("--workers", type=int, default=None, help="Parallel key fine-tunes (default KS_THREADS)")
    finetune.add_argument("--out", type=Path, required=True)
    _add_training_flags(finetune, epochs=10)
    finetune.set_defaults(handler=_cmd_finetune)

    predict = commands.add_parser("predict", help="Classify one image with the defended model")
    predict.add_argument("--manifest", type=Path, required=True)
    source = predict.add_mutually_exclusive_group(required=True)
    source.add_argument("--image", type=Path)
    source.add_argument("--data", type=Path)
    predict.add_argument("--index", type=int, default=0)
    predict.add_argument("--force-key", "--key-index", dest="key_index", type=int, default=None, help="Force a 1-based key")
    predict.add_argument("--seed", type=int, default=None, help="Sampler seed override")
    predict.set_defaults(handler=_cmd_predict)

    attack = commands.add_parser("attack", help="Attack the defended model and report")
    attack.add_argument("--method", choices=("fgsm", "pgd", "eot"), default="pgd")
    attack.add_argument("--norm", choices=("linf", "l2"), default="linf")
    attack.add_argument("--eps", type=float, default=None, help="Budget in [0, 1] pixel units (default 8/255 linf, 0.5 l2)")
    attack.add_argument("--eps-numerator", type=float, default=None, help="Budget as numerator over --eps-denominator")
    attack.add_argument("--eps-denominator", type=float, default=255.0)
    attack.add_argument("--steps", type=int, default=20)
    attack.add_argument("--step-size", type=float, default=None)
    attack.add_argument("--restarts", type=int, default=3)
    attack.add_argument("--no-random-start", action="store_true")
    attack.add_argument("--targeted", type=int, default=None)
    attack.add_argument("--scenario", choices=("white", "1", "2"), default="1")
    attack.add_argument("--attackers", type=int, default=1, help="Attacker pool size for eot")
    attack.add_argument("--finetune-epochs", type=int, default=10)
    attack.add_argument("--manifest", type=Path, required=True)
    attack.add_argument("--data", type=Path, default=None, help="Test dataset (default: test/ beside the manifest)")
    attack.add_argument("--train", type=Path, default=None, help="Attacker training set (default: train/ beside the manifest)")
    attack.add_argument("--limit", type=int, default=200, help="Selected images")
    attack.add_argument("--batch-size", type=int, default=64)
    attack.add_argument("--seed", type=int, default=0)
    attack.add_argument("--out", type=Path, required=True)
    attack.add_argument("--adv-out", type=Path, default=None)
    attack.set_defaults(handler=_cmd_attack)

    evaluate = commands.add_parser("evaluate", help="Run a declared multi-arm experiment")
    evaluate.add_argument("--manifest", type=Path, required=True)
    evaluate.add_argument("--config", type=Path, default=None, help="Experiment config JSON")
    evaluate.add_argument("--data-root", type=Path, default=None)
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.set_defaults(handler=_cmd_evaluate)

    report = commands.add_parser("report", help="Render a saved report")
    report.add_argument("--input", type=Path, required=True)
    report.add_argument("--csv", type=Path, default=None, help="Rewrite JSON and CSV here")
    report.set_defaults(handler=_cmd_report)
    return parser


def exit_code(error: BaseException) -> int:
    if isinstance(error, StageError):
        return exit_code(error.cause)
    if isinstance(error, (FormatError, LabelError)):
        return EXIT_FORMAT
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    return EXIT_FAILURE


def main(argv: Optional[Iterable[str]] = None) -> int:
    args = build_parser().parse_args(None if argv is None else list(argv))
    settings = load_settings()
    level = (args.log_level or settings.log_level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO))
    configure_runtime(settings)

    try:
        return args.handler(args, settings)
    except KeyShieldError as exc:
        _LOGGER.error("%s failed: %s", args.command, exc)
        return exit_code(exc)
    except Exception:
        _LOGGER.exception("%s failed", args.command)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover - script entry point
    sys.exit(main())
