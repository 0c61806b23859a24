import math
from typing import Dict

import numpy as np

from models.errors import InvalidInputError
from models.state import ModelState
from models.tensor import Parameter, Tensor
from services.tensor_service import RunningStats, TensorService


class ParameterBuilder:
    """Creates named parameters deterministically from one generator."""

    def __init__(self, seed: int, dtype="float32", zero_init_residual: bool = False):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.zero_init_residual = zero_init_residual
        self.params: Dict[str, Parameter] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def _add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise InvalidInputError(f"duplicate parameter name {name!r}")
        self.params[name] = Parameter(value.astype(self.dtype), name=name)

    def linear(self, prefix: str, in_features: int, out_features: int, bias: bool = True):
        bound = 1.0 / math.sqrt(in_features)
        self._add(f"{prefix}.weight", self.rng.uniform(-bound, bound, size=(out_features, in_features)))
        if bias:
            self._add(f"{prefix}.bias", np.zeros(out_features))

    def batch_norm(self, prefix: str, channels: int, residual: bool = False):
        scale = 0.0 if (residual and self.zero_init_residual) else 1.0
        self._add(f"{prefix}.gamma", np.full(channels, scale))
        self._add(f"{prefix}.beta", np.zeros(channels))
        self.buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype=self.dtype)
        self.buffers[f"{prefix}.running_var"] = np.ones(channels, dtype=self.dtype)


class ParameterService:
    @staticmethod
    def linear(x: Tensor, state: ModelState, prefix: str) -> Tensor:
        bias = state.params.get(f"{prefix}.bias")
        return TensorService.linear(x, state.param(f"{prefix}.weight"), bias)

    @staticmethod
    def batch_norm(x: Tensor, state: ModelState, prefix: str, training: bool) -> Tensor:
        stats = RunningStats(state.buffer(f"{prefix}.running_mean"), state.buffer(f"{prefix}.running_var"))
        return TensorService.batch_norm(x, stats, state.param(f"{prefix}.gamma"),
                                        state.param(f"{prefix}.beta"), training)

    @staticmethod
    def linear_bn_relu(x: Tensor, state: ModelState, prefix: str, training: bool) -> Tensor:
        h = ParameterService.linear(x, state, f"{prefix}.fc")
        h = ParameterService.batch_norm(h, state, f"{prefix}.bn", training)
        return TensorService.relu(h)
