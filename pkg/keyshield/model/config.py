"""Architecture configuration and its ``key = value`` sidecar."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Union

from ..errors import ConfigError, FormatError


@dataclass(frozen=True)
class ModelConfig:
    """ConvMixer-style isotropic network dimensions (desk-scale defaults)."""

    hidden_dim: int = 64
    depth: int = 4
    patch_size: int = 4
    kernel_size: int = 5
    num_classes: int = 10
    image_side: int = 32

    def __post_init__(self) -> None:
        for item in fields(self):
            if getattr(self, item.name) < 1:
                raise ConfigError(f"{item.name} must be >= 1")
        if self.image_side % self.patch_size:
            raise ConfigError(
                f"image_side {self.image_side} is not divisible by patch_size {self.patch_size}"
            )

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    def to_text(self) -> str:
        return "".join(f"{name} = {value}\n" for name, value in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {item.name for item in fields(cls)}
        values: Dict[str, int] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise FormatError(f"config line {number}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in known:
                raise ConfigError(f"config line {number}: unknown key {key!r}")
            try:
                values[key] = int(raw)
            except ValueError:
                raise ConfigError(f"config line {number}: {key} must be an integer") from None
        return cls(**values)

    def save(self, path: Union[str, Path]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.to_text(), encoding="utf-8")
        return target

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"Cannot read model config {path}: {exc}") from exc
        return cls.from_text(text)


__all__ = ["ModelConfig"]
