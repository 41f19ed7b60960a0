"""Secret keys and the block permutations they derive."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import ConfigError, FormatError
from .prng import SplitMix64

_LOGGER = logging.getLogger(__name__)

_U64_MAX = (1 << 64) - 1
_DECIMAL = re.compile(r"[0-9]+")


class SecretKey(BaseModel):
    """A 64-bit seed that deterministically yields a block permutation."""

    model_config = ConfigDict(frozen=True)

    seed: int = Field(ge=0, le=_U64_MAX)

    def to_line(self) -> str:
        return str(self.seed)

    @classmethod
    def from_line(cls, line: str) -> "SecretKey":
        text = line.strip()
        if _DECIMAL.fullmatch(text) is None:
            raise FormatError(f"Key line is not a decimal unsigned integer: {line!r}")
        value = int(text)
        if value > _U64_MAX:
            raise FormatError(f"Key exceeds 64 bits: {text}")
        return cls(seed=value)


@dataclass(frozen=True)
class PermutationVector:
    """Bijection on ``{0, ..., 3M^2 - 1}`` applied to every flattened block."""

    block_size: int
    entries: Tuple[int, ...]

    def __post_init__(self) -> None:
        expected = 3 * self.block_size * self.block_size
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if len(self.entries) != expected:
            raise ConfigError(
                f"Permutation for M={self.block_size} needs {expected} entries, got {len(self.entries)}"
            )
        if sorted(self.entries) != list(range(expected)):
            raise ConfigError("Permutation entries are not a bijection")

    @property
    def length(self) -> int:
        return len(self.entries)

    @classmethod
    def identity(cls, block_size: int) -> "PermutationVector":
        return cls(block_size, tuple(range(3 * block_size * block_size)))

    @classmethod
    def from_one_based(cls, block_size: int, entries: Sequence[int]) -> "PermutationVector":
        return cls(block_size, tuple(int(value) - 1 for value in entries))

    def to_one_based(self) -> List[int]:
        return [value + 1 for value in self.entries]

    def inverse(self) -> "PermutationVector":
        inverse = [0] * self.length
        for position, source in enumerate(self.entries):
            inverse[source] = position
        return PermutationVector(self.block_size, tuple(inverse))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.int64)

    def hamming(self, other: "PermutationVector") -> int:
        if other.length != self.length:
            raise ConfigError("Permutations differ in length")
        return sum(1 for a, b in zip(self.entries, other.entries) if a != b)


def derive_permutation(key: SecretKey, block_size: int) -> PermutationVector:
    """Seed splitmix64 with the key and Fisher-Yates shuffle the identity."""

    if block_size < 1:
        raise ConfigError("block_size must be >= 1")
    entries = list(range(3 * block_size * block_size))
    SplitMix64(key.seed).shuffle(entries)
    return PermutationVector(block_size, tuple(entries))


def generate_keys(count: int, seed: int) -> List[SecretKey]:
    """Draw ``count`` distinct keys from a splitmix64 stream."""

    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = SplitMix64(seed).split("keys")
    seen = set()
    keys: List[SecretKey] = []
    while len(keys) < count:
        value = rng.next_u64()
        if value in seen:
            continue
        seen.add(value)
        keys.append(SecretKey(seed=value))
    return keys


def load_key_file(path: Union[str, Path]) -> List[SecretKey]:
    """Read one decimal key per line; blank lines are ignored."""

    target = Path(path)
    try:
        text = target.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"Cannot read key file {target}: {exc}") from exc
    keys = [SecretKey.from_line(line) for line in text.splitlines() if line.strip()]
    _LOGGER.debug("Loaded %d keys from %s", len(keys), target)
    return keys


def save_key_file(path: Union[str, Path], keys: Iterable[SecretKey]) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as handle:
        for key in keys:
            handle.write(key.to_line() + "\n")


__all__ = [
    "PermutationVector",
    "SecretKey",
    "derive_permutation",
    "generate_keys",
    "load_key_file",
    "save_key_file",
]
