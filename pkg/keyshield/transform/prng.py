"""splitmix64 generator with named sub-streams."""
from __future__ import annotations

import hashlib
from typing import List, MutableSequence, TypeVar

import torch

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15

T = TypeVar("T")


class SplitMix64:
    """Deterministic 64-bit generator (Steele, Lea and Flood's splitmix64)."""

    def __init__(self, seed: int) -> None:
        self.seed = seed & _MASK64
        self._state = self.seed

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN_GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Draw in ``[0, bound)`` with the plain modulo reduction."""

        if bound < 1:
            raise ValueError("bound must be >= 1")
        return self.next_u64() % bound

    def uniform(self) -> float:
        """Draw a double in ``[0, 1)`` from the top 53 bits."""

        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: MutableSequence[T]) -> MutableSequence[T]:
        """Descending Fisher-Yates shuffle in place."""

        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def split(self, tag: str) -> "SplitMix64":
        """Independent generator for a named sub-stream of this seed."""

        digest = hashlib.sha256(f"{self.seed}:{tag}".encode("utf-8")).digest()
        return SplitMix64(int.from_bytes(digest[:8], byteorder="little"))

    def torch_generator(self) -> torch.Generator:
        """Seed a torch CPU generator from the next draw."""

        generator = torch.Generator()
        generator.manual_seed(self.next_u64() & ((1 << 63) - 1))
        return generator

    def sample(self, population: int, count: int) -> List[int]:
        """Sample ``count`` distinct indices from ``range(population)``."""

        order = list(range(population))
        self.shuffle(order)
        return order[:count]


__all__ = ["SplitMix64"]
