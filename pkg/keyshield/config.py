"""Runtime settings for keyshield, read from the environment."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

try:  # pragma: no cover - optional dependency
    from dotenv import load_dotenv
except ImportError:  # pragma: no cover - optional dependency
    load_dotenv = None

if load_dotenv is not None:  # pragma: no cover - optional dependency
    load_dotenv()


_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class Settings:
    """Process-wide settings shared by every stage."""

    data_dir: Path
    threads: Optional[int] = None
    debug: bool = False
    log_level: str = "INFO"

    @property
    def workers(self) -> int:
        """Worker count for data-parallel stages."""

        if self.threads is not None:
            return self.threads
        return os.cpu_count() or 1


def _read_bool(value: Optional[str], default: bool = False) -> bool:
    if value is None:
        return default
    value = value.strip().lower()
    if value in {"1", "true", "yes", "on"}:
        return True
    if value in {"0", "false", "no", "off"}:
        return False
    return default


def _maybe_int(value: Optional[str]) -> Optional[int]:
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        return None


def _positive_or_none(value: Optional[int]) -> Optional[int]:
    if value is None or value < 1:
        return None
    return value


def load_settings() -> Settings:
    """Load settings from ``KS_*`` environment variables."""

    return Settings(
        data_dir=Path(os.getenv("KS_DATA_DIR", "./data")).expanduser(),
        threads=_positive_or_none(_maybe_int(os.getenv("KS_THREADS"))),
        debug=_read_bool(os.getenv("KS_DEBUG")),
        log_level=os.getenv("KS_LOG_LEVEL", "INFO").upper(),
    )


def debug_enabled() -> bool:
    """Whether kernels should verify their outputs are finite."""

    return _read_bool(os.getenv("KS_DEBUG"))


def configure_runtime(settings: Optional[Settings] = None) -> Settings:
    """Apply thread caps and deterministic kernels to torch."""

    settings = settings or load_settings()
    if settings.threads is not None:
        torch.set_num_threads(settings.threads)
    torch.use_deterministic_algorithms(True)
    _LOGGER.debug(
        "Runtime configured: threads=%s debug=%s", torch.get_num_threads(), settings.debug
    )
    return settings


__all__ = ["Settings", "configure_runtime", "debug_enabled", "load_settings"]
