"""File-backed persistence of a defended classifier via ``defense.manifest``."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError

from ..errors import ConfigError, FormatError
from ..model.config import ModelConfig
from ..model.network import IsotropicNet
from ..model.store import (
    BACKBONE_FILE,
    CONFIG_FILE,
    PLAIN_PAIR_FILE,
    load_backbone,
    load_pair,
    pair_filename,
    save_pair,
)
from ..transform.keys import derive_permutation, load_key_file
from .classifier import DefendedClassifier, PoolEntry
from .schemas import DefenseManifest

_LOGGER = logging.getLogger(__name__)

MANIFEST_FILE = "defense.manifest"


def _relative(path: Path, base: Path) -> str:
    try:
        return os.path.relpath(path.resolve(), base.resolve())
    except ValueError:
        return str(path.resolve())


def _resolve(raw: str, base: Path) -> Path:
    path = Path(raw).expanduser()
    return path if path.is_absolute() else base / path


def save_manifest(manifest: DefenseManifest, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as handle:
        json.dump(manifest.model_dump(mode="json"), handle, indent=2)
        handle.write("\n")
    return target


def load_manifest(path: Union[str, Path]) -> DefenseManifest:
    target = Path(path)
    try:
        with target.open("r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except OSError as exc:
        raise FormatError(f"Cannot read manifest {target}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"Manifest {target} is not valid JSON: {exc}") from exc
    try:
        return DefenseManifest.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"Manifest {target} is invalid: {exc}") from exc


def manifest_hash(path: Union[str, Path]) -> str:
    """Git-style blob hash of the manifest bytes."""

    content = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def save_defense(
    d: DefendedClassifier,
    directory: Union[str, Path],
    key_file: Union[str, Path],
    model_dir: Union[str, Path],
) -> Path:
    """Write one pair file per key and a manifest referencing the shared backbone."""

    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    model_dir = Path(model_dir)
    pair_paths = []
    for entry in d.pool:
        path = save_pair(target / pair_filename(entry.pair.key_id), entry.pair)
        pair_paths.append(_relative(path, target))

    manifest = DefenseManifest(
        block_size=d.block_size,
        n=d.size,
        key_file=_relative(Path(key_file), target),
        pair_paths=pair_paths,
        backbone_path=_relative(model_dir / BACKBONE_FILE, target),
        plain_pair_path=_relative(model_dir / PLAIN_PAIR_FILE, target),
        model_config_path=_relative(model_dir / CONFIG_FILE, target),
        sampler_seed=d.sampler_seed,
    )
    path = save_manifest(manifest, target / MANIFEST_FILE)
    _LOGGER.info("Saved defense with %d keys to %s", d.size, path)
    return path


def load_defense(path: Union[str, Path], sampler_seed: Optional[int] = None) -> DefendedClassifier:
    """Rebuild the defended classifier; pool key i is line i of the key file."""

    manifest_path = Path(path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    config = ModelConfig.load(_resolve(manifest.model_config_path, base))
    backbone = load_backbone(_resolve(manifest.backbone_path, base), config).freeze()
    keys = load_key_file(_resolve(manifest.key_file, base))
    if len(keys) < manifest.n:
        raise ConfigError(f"Key file holds {len(keys)} keys, manifest needs {manifest.n}")

    entries = []
    for position, (key, raw) in enumerate(zip(keys[: manifest.n], manifest.pair_paths), start=1):
        pair = load_pair(_resolve(raw, base), config, key_id=position)
        entries.append(PoolEntry(key, derive_permutation(key, manifest.block_size), pair))
    seed = manifest.sampler_seed if sampler_seed is None else sampler_seed
    return DefendedClassifier(config, backbone, entries, manifest.block_size, seed)


def load_plain_model(path: Union[str, Path]) -> IsotropicNet:
    """The pre-trained classifier the manifest's defense was built from."""

    manifest_path = Path(path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    config = ModelConfig.load(_resolve(manifest.model_config_path, base))
    backbone = load_backbone(_resolve(manifest.backbone_path, base), config).freeze()
    pair = load_pair(_resolve(manifest.plain_pair_path, base), config)
    return IsotropicNet(config, pair.embedding, backbone, pair.head).eval()


__all__ = [
    "MANIFEST_FILE",
    "load_defense",
    "load_manifest",
    "load_plain_model",
    "manifest_hash",
    "save_defense",
    "save_manifest",
]
