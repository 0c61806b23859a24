from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, Tuple

import numpy as np

from models.errors import InvalidInputError
from models.settings import NetworkConfig
from models.tensor import Parameter


@dataclass
class ModelState:
    """Learnable parameters, normalization statistics and the epoch counter."""
    params: Dict[str, Parameter]
    buffers: Dict[str, np.ndarray]
    config: NetworkConfig
    seed: int
    epoch: int = 0
    extra: Dict[str, str] = field(default_factory=dict)

    def param(self, name: str) -> Parameter:
        try:
            return self.params[name]
        except KeyError:
            raise InvalidInputError(f"no parameter named {name!r}") from None

    def buffer(self, name: str) -> np.ndarray:
        try:
            return self.buffers[name]
        except KeyError:
            raise InvalidInputError(f"no buffer named {name!r}") from None

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield name, p.data
        for name, b in self.buffers.items():
            yield name, b

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "ModelState":
        params = {n: Parameter(p.data.copy(), name=n) for n, p in self.params.items()}
        buffers = {n: b.copy() for n, b in self.buffers.items()}
        return ModelState(params=params, buffers=buffers, config=self.config.model_copy(deep=True),
                          seed=self.seed, epoch=self.epoch, extra=dict(self.extra))

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)
