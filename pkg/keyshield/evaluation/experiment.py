"""End-to-end experiment over a saved defense, as a langgraph stage pipeline.

Stages run in a fixed order (load, clean, white, scenario1, scenario2, eot,
emit); an undeclared arm's stage is a no-op. Every random choice is split from
the experiment seed by name, so a rerun reproduces the CSV byte for byte.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from functools import wraps
from pathlib import Path
from typing import Callable, Dict, List, Optional, TypedDict, Union

from langgraph.graph import END, START, StateGraph
from pydantic import ValidationError

from ..attacks.config import AttackConfig
from ..attacks.metrics import Selection, defended_accuracy, select_correct
from ..attacks.scenarios import (
    build_attacker_pool,
    eot_arm,
    guessed_key_model,
    scenario1_transfer,
    scenario2_transfer,
    white_box_arm,
)
from ..defense.classifier import DefendedClassifier
from ..defense.config import TrainConfig
from ..defense.manifest_store import load_defense, load_plain_model, manifest_hash
from ..errors import ConfigError, FormatError, StageError
from ..model.network import IsotropicNet
from ..transform.keys import SecretKey
from ..transform.prng import SplitMix64
from .container import DatasetContainer, load_dataset
from .report import write_report
from .schemas import ArmResult, EvalReport, ExperimentConfig

_LOGGER = logging.getLogger(__name__)

STAGES = ("load", "clean", "white", "scenario1", "scenario2", "eot", "emit")


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    source = Path(path)
    try:
        with source.open("r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except OSError as exc:
        raise FormatError(f"Cannot read experiment config {source}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"Experiment config {source} is not valid JSON: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"Experiment config {source} is invalid: {exc}") from exc


@dataclass
class _Run:
    """Mutable context shared by the stages of one run."""

    manifest_path: Path
    config: ExperimentConfig
    data_root: Path
    out_dir: Optional[Path]
    report: EvalReport
    defended: Optional[DefendedClassifier] = None
    plain: Optional[IsotropicNet] = None
    testset: Optional[DatasetContainer] = None
    trainset: Optional[DatasetContainer] = None
    clean: Dict[int, float] = field(default_factory=dict)
    selections: Dict[int, Selection] = field(default_factory=dict)

    def stream(self, tag: str) -> SplitMix64:
        return SplitMix64(self.config.seed).split(tag)

    def pools(self) -> List[DefendedClassifier]:
        sizes = self.config.pool_sizes or [self.defended.size]
        return [self.defended if size == self.defended.size else self.defended.truncated(size) for size in sizes]

    def clean_accuracy(self, pool: DefendedClassifier) -> float:
        if pool.size not in self.clean:
            self.clean[pool.size] = defended_accuracy(pool, self.testset)
        return self.clean[pool.size]

    def selection(self, pool: DefendedClassifier) -> Selection:
        if pool.size not in self.selections:
            self.selections[pool.size] = select_correct(
                pool, self.testset, self.config.selection_size, seed=self.stream("selection").next_u64()
            )
        return self.selections[pool.size]

    def attack_config(self, arm: str, norm: str) -> AttackConfig:
        cfg = self.config
        return AttackConfig(
            norm=norm,
            epsilon=cfg.epsilon(norm),
            steps=cfg.steps,
            random_start=cfg.random_start,
            restarts=cfg.restarts,
            targeted=cfg.targeted,
            seed=self.stream(f"attack:{arm}:{norm}").next_u64(),
        )

    def train_config(self, tag: str) -> TrainConfig:
        cfg = self.config
        return TrainConfig(
            learning_rate=cfg.finetune_learning_rate,
            epochs=cfg.finetune_epochs,
            batch_size=cfg.batch_size,
            seed=self.stream(f"train:{tag}").next_u64(),
        )

    def fresh_keys(self, tag: str, count: int) -> List[SecretKey]:
        """``count`` distinct keys outside the defender pool."""

        taken = {key.seed for key in self.defended.keys}
        rng = self.stream(tag)
        keys: List[SecretKey] = []
        while len(keys) < count:
            seed = rng.next_u64()
            if seed not in taken:
                taken.add(seed)
                keys.append(SecretKey(seed=seed))
        return keys

    def add(self, result: ArmResult) -> None:
        self.report.arms.append(result)


class _State(TypedDict, total=False):
    run: _Run


def _stage(name: str, arm: Optional[str] = None) -> Callable[[Callable[[_Run], None]], Callable[[_State], _State]]:
    def decorate(body: Callable[[_Run], None]) -> Callable[[_State], _State]:
        @wraps(body)
        def node(state: _State) -> _State:
            run = state["run"]
            if arm is not None and arm not in run.config.arms:
                return {"run": run}
            started = time.perf_counter()
            _LOGGER.info("Stage %s started", name)
            try:
                body(run)
            except StageError:
                raise
            except Exception as exc:
                _LOGGER.exception("Stage %s failed", name)
                raise StageError(name, exc) from exc
            finally:
                run.report.timing[name] = time.perf_counter() - started
            return {"run": run}

        return node

    return decorate


@_stage("load")
def _load(run: _Run) -> None:
    cfg = run.config
    run.defended = load_defense(run.manifest_path)
    needs_plain = {"scenario1", "scenario2", "eot"} & set(cfg.arms)
    if needs_plain:
        run.plain = load_plain_model(run.manifest_path)
    num_classes = run.defended.config.num_classes
    testset = load_dataset(run.data_root / cfg.test_dir, num_classes)
    run.testset = testset.head(cfg.test_limit) if cfg.test_limit else testset
    if {"scenario2", "eot"} & set(cfg.arms):
        if cfg.train_dir is None:
            raise ConfigError("scenario2 and eot arms need train_dir")
        run.trainset = load_dataset(run.data_root / cfg.train_dir, num_classes)
    if cfg.pool_sizes and max(cfg.pool_sizes) > run.defended.size:
        raise ConfigError(f"pool size {max(cfg.pool_sizes)} exceeds the manifest pool of {run.defended.size}")


@_stage("clean")
def _clean(run: _Run) -> None:
    for pool in run.pools():
        value = run.clean_accuracy(pool)
        _LOGGER.info("clean accuracy %.3f with %d keys", value, pool.size)
        if "clean" in run.config.arms:
            run.add(
                ArmResult(
                    arm="clean",
                    key_mode="sampled",
                    pool_size=pool.size,
                    examples=run.testset.count,
                    clean_accuracy=value,
                )
            )
    run.report.clean_accuracy = run.clean_accuracy(run.defended)


@_stage("white", arm="white")
def _white(run: _Run) -> None:
    for pool in run.pools():
        for norm in run.config.norms:
            run.add(
                white_box_arm(
                    pool,
                    run.testset,
                    run.selection(pool),
                    run.attack_config("white", norm),
                    batch_size=run.config.batch_size,
                    clean_accuracy=run.clean_accuracy(pool),
                )
            )


@_stage("scenario1", arm="scenario1")
def _scenario1(run: _Run) -> None:
    for pool in run.pools():
        for norm in run.config.norms:
            run.add(
                scenario1_transfer(
                    run.plain,
                    pool,
                    run.testset,
                    run.attack_config("scenario1", norm),
                    batch_size=run.config.batch_size,
                    clean_accuracy=run.clean_accuracy(pool),
                )
            )


@_stage("scenario2", arm="scenario2")
def _scenario2(run: _Run) -> None:
    guessed = run.fresh_keys("guess", 1)[0]
    surrogate = guessed_key_model(run.plain, guessed, run.defended, run.trainset, run.train_config("guess"))
    for pool in run.pools():
        for norm in run.config.norms:
            run.add(
                scenario2_transfer(
                    run.plain,
                    guessed,
                    pool,
                    run.trainset,
                    run.testset,
                    run.attack_config("scenario2", norm),
                    batch_size=run.config.batch_size,
                    clean_accuracy=run.clean_accuracy(pool),
                    surrogate=surrogate,
                )
            )


@_stage("eot", arm="eot")
def _eot(run: _Run) -> None:
    sizes = sorted(set(run.config.eot_pool_sizes))
    keys = run.fresh_keys("attacker", max(sizes))
    attacker = build_attacker_pool(run.plain, keys, run.defended, run.trainset, run.train_config("attacker"))
    for pool in run.pools():
        for norm in run.config.norms:
            config = run.attack_config("eot", norm)
            for size in sizes:
                run.add(
                    eot_arm(
                        attacker.truncated(size),
                        pool,
                        run.testset,
                        run.selection(pool),
                        config,
                        batch_size=run.config.batch_size,
                        clean_accuracy=run.clean_accuracy(pool),
                    )
                )


@_stage("emit")
def _emit(run: _Run) -> None:
    if run.out_dir is not None:
        write_report(run.report, run.out_dir)


def _build_graph():
    graph = StateGraph(_State)
    nodes = {
        "load": _load,
        "clean": _clean,
        "white": _white,
        "scenario1": _scenario1,
        "scenario2": _scenario2,
        "eot": _eot,
        "emit": _emit,
    }
    for name in STAGES:
        graph.add_node(f"{name}_stage", nodes[name], input_schema=_State)
    graph.add_edge(START, f"{STAGES[0]}_stage")
    for current, following in zip(STAGES, STAGES[1:]):
        graph.add_edge(f"{current}_stage", f"{following}_stage")
    graph.add_edge(f"{STAGES[-1]}_stage", END)
    return graph.compile()


_EXPERIMENT_GRAPH = _build_graph()


def run_experiment(
    manifest: Union[str, Path],
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
    data_root: Optional[Union[str, Path]] = None,
) -> EvalReport:
    """Run every declared arm against the defense saved at ``manifest``.

    Dataset directories resolve against ``data_root`` (default: the manifest's
    directory). On a stage failure the results gathered so far are written
    with ``partial: true`` and :class:`StageError` is raised.
    """

    manifest_path = Path(manifest)
    if not manifest_path.exists():
        raise StageError("load", FormatError(f"Manifest {manifest_path} does not exist"))
    report = EvalReport(manifest_hash=manifest_hash(manifest_path), config=config)
    run = _Run(
        manifest_path=manifest_path,
        config=config,
        data_root=Path(data_root) if data_root is not None else manifest_path.parent,
        out_dir=Path(out_dir) if out_dir is not None else None,
        report=report,
    )
    try:
        _EXPERIMENT_GRAPH.invoke({"run": run})
    except StageError as exc:
        report.partial = True
        report.failed_stage = exc.stage
        report.error = str(exc.cause)
        if run.out_dir is not None:
            write_report(report, run.out_dir)
        exc.report = report
        raise
    return report


__all__ = ["STAGES", "load_experiment_config", "run_experiment"]
