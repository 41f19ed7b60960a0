"""Gradient tape scoping one forward/backward pair over torch autograd."""
from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import torch

from ..errors import ShapeError, TapeError

_LOGGER = logging.getLogger(__name__)

_ACTIVE_TAPE: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar(
    "keyshield_active_tape", default=None
)


@dataclass(frozen=True)
class TapeRecord:
    kind: str
    shape: Tuple[int, ...]


@dataclass
class GradientMap:
    """Result of :func:`backward`."""

    parameters: Dict[str, torch.Tensor] = field(default_factory=dict)
    input: Optional[torch.Tensor] = None

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.parameters[name]


class GradTape:
    """Records the kernel operations of one forward pass.

    Single writer: one forward/backward pair per tape. Use as a context manager;
    kernels executed inside the ``with`` block are recorded in execution order.
    """

    def __init__(self) -> None:
        self._records: List[TapeRecord] = []
        self._outputs: Dict[int, torch.Tensor] = {}
        self._token: Optional[contextvars.Token] = None
        self._consumed = False

    def __enter__(self) -> "GradTape":
        if self._token is not None:
            raise TapeError("Tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    @property
    def operations(self) -> List[str]:
        return [record.kind for record in self._records]

    @property
    def records(self) -> List[TapeRecord]:
        return list(self._records)

    def watch(self, tensor: torch.Tensor) -> torch.Tensor:
        """Return a leaf copy of ``tensor`` whose gradient can be requested."""

        return tensor.detach().clone().requires_grad_(True)

    def record(self, kind: str, output: torch.Tensor) -> torch.Tensor:
        if self._consumed:
            raise TapeError("Tape was already used for backward")
        self._records.append(TapeRecord(kind, tuple(output.shape)))
        self._outputs[id(output)] = output
        return output

    def owns(self, tensor: torch.Tensor) -> bool:
        return self._outputs.get(id(tensor)) is tensor

    def _consume(self) -> None:
        self._consumed = True
        self._outputs.clear()


def active_tape() -> Optional[GradTape]:
    return _ACTIVE_TAPE.get()


def record(kind: str, output: torch.Tensor) -> torch.Tensor:
    """Record ``output`` on the active tape, if any."""

    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(kind, output)
    return output


def backward(
    tape: GradTape,
    loss: torch.Tensor,
    parameters: Optional[Mapping[str, torch.Tensor]] = None,
    inputs: Optional[torch.Tensor] = None,
) -> GradientMap:
    """Differentiate a scalar ``loss`` recorded on ``tape``.

    Returns gradients for every tracked (``requires_grad``) parameter and, when
    ``inputs`` is given, for the watched input. Parameters the forward never
    touched receive exact zeros.
    """

    if loss.numel() != 1:
        raise ShapeError("backward", [tuple(loss.shape)], "loss must be a scalar")
    if not tape.owns(loss):
        raise TapeError("Loss was not recorded on this tape")

    tracked = {name: value for name, value in (parameters or {}).items() if value.requires_grad}
    targets: List[torch.Tensor] = list(tracked.values())
    if inputs is not None:
        if not inputs.requires_grad:
            raise TapeError("Input gradient requested for a tensor that was not watched")
        targets.append(inputs)

    if targets and loss.requires_grad:
        grads = torch.autograd.grad(loss.reshape(()), targets, allow_unused=True)
    else:
        grads = tuple(None for _ in targets)
    tape._consume()

    result = GradientMap()
    for (name, value), grad in zip(tracked.items(), grads):
        result.parameters[name] = torch.zeros_like(value) if grad is None else grad
    if inputs is not None:
        grad = grads[-1]
        result.input = torch.zeros_like(inputs) if grad is None else grad
    return result


__all__ = ["GradTape", "GradientMap", "TapeRecord", "active_tape", "backward", "record"]
