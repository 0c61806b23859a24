from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from models.errors import ShapeMismatchError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """Dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


@dataclass
class _Record:
    inputs: Sequence[Tensor]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of executed operations.

    Operations executed inside ``with Tape() as tape:`` are recorded when at
    least one input requires a gradient. ``backward`` replays the adjoints in
    exact reverse order.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    @staticmethod
    def active() -> Optional["Tape"]:
        return _ACTIVE_TAPE.get()

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            seed = np.ones_like(output.data)
        elif np.shape(seed) != output.shape:
            raise ShapeMismatchError(f"seed gradient {np.shape(seed)} does not match output {output.shape}")

        produced = {id(r.output) for r in self.records}
        adjoints = {id(output): np.asarray(seed, dtype=output.dtype)}
        if id(output) not in produced and output.requires_grad:
            _accumulate_leaf(output, adjoints[id(output)])

        for rec in reversed(self.records):
            grad_out = adjoints.pop(id(rec.output), None)
            if grad_out is None:
                continue
            for inp, grad_in in zip(rec.inputs, rec.backward(grad_out)):
                if grad_in is None or not inp.requires_grad:
                    continue
                if id(inp) in produced:
                    prev = adjoints.get(id(inp))
                    adjoints[id(inp)] = grad_in if prev is None else prev + grad_in
                else:
                    _accumulate_leaf(inp, grad_in)


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray):
    grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
