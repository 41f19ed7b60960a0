"""Separable 10-class toy images: colored shapes on textured backgrounds."""
from __future__ import annotations

import logging
from typing import Callable, Dict, List, Tuple

import cv2
import numpy as np

from ..errors import ConfigError
from ..transform.prng import SplitMix64
from .container import DatasetContainer

_LOGGER = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "diamond")
PALETTES = ("warm", "cool")
CLASS_NAMES: List[str] = [f"{palette}-{shape}" for palette in PALETTES for shape in SHAPES]

_PALETTE_RANGES: Dict[str, Tuple[Tuple[int, int], ...]] = {
    "warm": ((200, 256), (40, 110), (10, 60)),
    "cool": ((10, 60), (90, 160), (200, 256)),
}

Painter = Callable[[np.ndarray, Tuple[int, int], int, Tuple[int, int, int]], None]


def _circle(canvas, center, radius, color) -> None:
    cv2.circle(canvas, center, radius, color, thickness=-1, lineType=cv2.LINE_AA)


def _square(canvas, center, radius, color) -> None:
    x, y = center
    cv2.rectangle(canvas, (x - radius, y - radius), (x + radius, y + radius), color, thickness=-1)


def _triangle(canvas, center, radius, color) -> None:
    x, y = center
    points = np.array([[x, y - radius], [x - radius, y + radius], [x + radius, y + radius]], dtype=np.int32)
    cv2.fillPoly(canvas, [points], color, lineType=cv2.LINE_AA)


def _cross(canvas, center, radius, color) -> None:
    x, y = center
    width = max(1, radius // 2)
    cv2.rectangle(canvas, (x - radius, y - width), (x + radius, y + width), color, thickness=-1)
    cv2.rectangle(canvas, (x - width, y - radius), (x + width, y + radius), color, thickness=-1)


def _diamond(canvas, center, radius, color) -> None:
    x, y = center
    points = np.array([[x, y - radius], [x + radius, y], [x, y + radius], [x - radius, y]], dtype=np.int32)
    cv2.fillPoly(canvas, [points], color, lineType=cv2.LINE_AA)


_PAINTERS: Dict[str, Painter] = {
    "circle": _circle,
    "square": _square,
    "triangle": _triangle,
    "cross": _cross,
    "diamond": _diamond,
}


def _background(rng: np.random.Generator, side: int) -> np.ndarray:
    base = int(rng.integers(60, 140))
    canvas = np.full((side, side, 3), base, dtype=np.int16)
    canvas += rng.normal(0.0, 12.0, size=canvas.shape).astype(np.int16)
    canvas = np.clip(canvas, 0, 255).astype(np.uint8)
    for _ in range(int(rng.integers(2, 5))):
        start = tuple(int(v) for v in rng.integers(0, side, size=2))
        end = tuple(int(v) for v in rng.integers(0, side, size=2))
        tone = int(rng.integers(40, 180))
        cv2.line(canvas, start, end, (tone, tone, tone), thickness=1)
    return canvas


def render_image(label: int, rng: np.random.Generator, side: int = 32) -> np.ndarray:
    """One ``(3, side, side)`` uint8 image of class ``label``."""

    palette = PALETTES[label // len(SHAPES)]
    shape = SHAPES[label % len(SHAPES)]
    canvas = _background(rng, side)
    radius = int(rng.integers(side // 4, side // 3 + 1))
    jitter = max(1, side // 8)
    center = tuple(int(side // 2 + v) for v in rng.integers(-jitter, jitter + 1, size=2))
    color = tuple(int(rng.integers(low, high)) for low, high in _PALETTE_RANGES[palette])
    _PAINTERS[shape](canvas, center, radius, color)
    return np.ascontiguousarray(canvas.transpose(2, 0, 1))


def synthesize_dataset(count: int, seed: int = 0, side: int = 32) -> DatasetContainer:
    """Balanced, shuffled dataset; identical bytes for identical arguments."""

    if count < 0:
        raise ConfigError("count must be >= 0")
    if side < 8:
        raise ConfigError("side must be >= 8")
    rng = np.random.default_rng(SplitMix64(seed).split("synthesize").next_u64())
    labels = np.arange(count, dtype=np.int64) % len(CLASS_NAMES)
    labels = labels[rng.permutation(count)]
    images = np.zeros((count, 3, side, side), dtype=np.uint8)
    for position, label in enumerate(labels):
        images[position] = render_image(int(label), rng, side)
    _LOGGER.info("Synthesized %d images (%dx%d) with seed %d", count, side, side, seed)
    return DatasetContainer(images, labels)


__all__ = ["CLASS_NAMES", "PALETTES", "SHAPES", "render_image", "synthesize_dataset"]
