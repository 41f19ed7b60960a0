"""``KSNET1`` checkpoint container for named float32 tensors."""
from __future__ import annotations

import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np
import torch

from ..errors import FormatError

_LOGGER = logging.getLogger(__name__)

MAGIC = b"KSNET1"
_U32 = struct.Struct("<I")


def encode_checkpoint(tensors: Mapping[str, torch.Tensor]) -> bytes:
    parts = [MAGIC]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        values = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(values.ndim))
        parts.extend(_U32.pack(dim) for dim in values.shape)
        parts.append(values.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Dict[str, torch.Tensor]:
    if not payload.startswith(MAGIC):
        raise FormatError(f"{source}: bad magic, expected {MAGIC!r}")
    tensors: Dict[str, torch.Tensor] = OrderedDict()
    offset = len(MAGIC)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(payload):
            raise FormatError(
                f"{source}: truncated at byte {offset}, needed {count} more bytes, {len(payload) - offset} left"
            )
        chunk = payload[offset : offset + count]
        offset += count
        return chunk

    while offset < len(payload):
        (name_length,) = _U32.unpack(take(4))
        raw_name = take(name_length)
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: tensor name at byte {offset - name_length} is not UTF-8") from exc
        (rank,) = _U32.unpack(take(4))
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor name {name!r}")
        tensors[name] = torch.from_numpy(values.copy())
    return tensors


def write_checkpoint(path: Union[str, Path], tensors: Mapping[str, torch.Tensor]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_checkpoint(tensors))
    _LOGGER.debug("Wrote %d tensors to %s", len(tensors), target)
    return target


def read_checkpoint(path: Union[str, Path]) -> Dict[str, torch.Tensor]:
    target = Path(path)
    try:
        payload = target.read_bytes()
    except OSError as exc:
        raise FormatError(f"Cannot read checkpoint {target}: {exc}") from exc
    return decode_checkpoint(payload, source=str(target))


__all__ = ["MAGIC", "decode_checkpoint", "encode_checkpoint", "read_checkpoint", "write_checkpoint"]
