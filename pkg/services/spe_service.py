import logging
from typing import Dict, List, Optional

import numpy as np

from models.entities import BRANCH_ORDER, AttentionWeights, EncodingKind, LocalGroup
from models.errors import ShapeMismatchError
from models.settings import SPEConfig
from models.state import ModelState
from models.tensor import Tensor
from services.parameter_service import ParameterBuilder, ParameterService
from services.tensor_service import TensorService

logger = logging.getLogger(__name__)

SINGLE_KINDS = {"cd": EncodingKind.CD, "zri": EncodingKind.ZRI, "ari": EncodingKind.ARI}


def bottleneck_width(channels: int) -> int:
    """Half width, kept a multiple of 3 so it can be sliced into branches."""
    return 3 * max(1, channels // 6)


def encoding_kinds(variant: str) -> List[EncodingKind]:
    if variant in SINGLE_KINDS:
        return [SINGLE_KINDS[variant]]
    return list(BRANCH_ORDER)


class SPEService:
    # --- Parameter layout ---
    @staticmethod
    def init_mlp(builder: ParameterBuilder, prefix: str, in_width: int, out_width: int, layers: int):
        width = in_width
        for layer in range(layers):
            builder.linear(f"{prefix}.layer{layer}.fc", width, out_width)
            builder.batch_norm(f"{prefix}.layer{layer}.bn", out_width)
            width = out_width

    @staticmethod
    def init_local(builder: ParameterBuilder, prefix: str, cfg: SPEConfig, variant: str):
        """Parameters of one local aggregation (SPE-MLP or a single-type point-wise MLP)."""
        if variant in SINGLE_KINDS:
            kind = SINGLE_KINDS[variant]
            SPEService.init_mlp(builder, f"{prefix}.branch", 2 * cfg.in_channels + kind.width,
                                cfg.out_channels, cfg.mlp_layers)
            return
        part_in = cfg.padded_in_channels // 3
        part_out = cfg.out_channels // 3
        for k, kind in enumerate(BRANCH_ORDER):
            SPEService.init_mlp(builder, f"{prefix}.branch{k}", 2 * part_in + kind.width, part_out, cfg.mlp_layers)
        if variant == "sel":
            builder.linear(f"{prefix}.select", cfg.in_channels, cfg.out_channels)

    # --- Encoding selection and mask-out ---
    @staticmethod
    def selection_weights(f: Tensor, weight: Tensor, bias: Optional[Tensor]) -> List[Tensor]:
        """
        alpha = sigmoid(FC(f)), split into three equal per-point blocks
        """
        if weight.shape[1] != f.shape[-1]:
            raise ShapeMismatchError(f"selection FC expects width {weight.shape[1]}, features have {f.shape[-1]}")
        if weight.shape[0] % 3:
            raise ShapeMismatchError(f"selection FC output {weight.shape[0]} is not divisible by 3")
        return TensorService.slice_last(TensorService.sigmoid(TensorService.linear(f, weight, bias)), 3)

    @staticmethod
    def attention(alphas: List[Tensor]) -> AttentionWeights:
        return AttentionWeights(np.stack([a.data for a in alphas], axis=1))

    @staticmethod
    def is_masked(epoch: int, maskout_epochs: int) -> bool:
        return epoch < maskout_epochs

    @staticmethod
    def held_entries(state: ModelState, epoch: int) -> Dict[str, np.ndarray]:
        """
        Boolean masks of the selection-FC rows that produce the CD and Z-RI weights.
        The optimizer leaves these entries alone while the mask-out window is open.
        """
        if state.config.variant != "sel" or not SPEService.is_masked(epoch, state.config.maskout_epochs):
            return {}
        held = {}
        for name, p in state.params.items():
            if name.endswith(".select.weight") or name.endswith(".select.bias"):
                mask = np.zeros(p.shape, dtype=bool)
                mask[: 2 * p.shape[0] // 3] = True
                held[name] = mask
        return held

    @staticmethod
    def apply_maskout(alphas: List[Tensor], epoch: int, maskout_epochs: int) -> List[Tensor]:
        """
        During the first T epochs the CD and Z-RI weights become constant zeros
        (no gradient reaches their producers); the A-RI weight is untouched.
        """
        if not SPEService.is_masked(epoch, maskout_epochs):
            return list(alphas)
        zeros = [Tensor(np.zeros_like(a.data)) for a in alphas[:2]]
        return zeros + [alphas[2]]

    # --- Branch MLPs ---
    @staticmethod
    def mlp(x: Tensor, state: ModelState, prefix: str, layers: int, training: bool) -> Tensor:
        for layer in range(layers):
            x = ParameterService.linear_bn_relu(x, state, f"{prefix}.layer{layer}", training)
        return x

    @staticmethod
    def branch_features(f_k: Tensor, group: LocalGroup, encoding: np.ndarray, state: ModelState,
                        prefix: str, layers: int, training: bool) -> Tensor:
        """
        g_ij = F_k([f_i, f_j - f_i, P_k(p_i, p_j)]) for every (query, neighbor) pair
        """
        expected = state.param(f"{prefix}.layer0.fc.weight").shape[1]
        width = 2 * f_k.shape[-1] + encoding.shape[-1]
        if width != expected:
            raise ShapeMismatchError(
                f"{prefix}: features + encoding give width {width}, the branch MLP expects {expected}")
        k = group.k
        f_i = TensorService.gather_rows(f_k, np.repeat(group.query_rows[:, None], k, axis=1))
        f_j = TensorService.gather_rows(f_k, group.neighbor_rows)
        delta = TensorService.sub(f_j, f_i)
        position = Tensor(encoding.astype(f_k.dtype))
        x = TensorService.concat_last([f_i, delta, position])
        return SPEService.mlp(x, state, prefix, layers, training)

    # --- SPE-MLP ---
    @staticmethod
    def spe_mlp(f: Tensor, group: LocalGroup, cfg: SPEConfig, state: ModelState, prefix: str,
                epoch: int, training: bool, variant: str = "sel", trace: Optional[list] = None) -> Tensor:
        """
        Encoding selection: three sliced branches (CD, Z-RI, A-RI) scaled by
        their attention weights, concatenated and max-pooled over neighbors.
        `variant="fused"` uses unit weights instead of the selection FC.
        """
        if f.shape[-1] != cfg.in_channels:
            raise ShapeMismatchError(f"{prefix}: expected {cfg.in_channels} channels, got {f.shape[-1]}")
        parts = TensorService.slice_last(TensorService.pad_last(f, cfg.padded_in_channels), 3)
        m, k = group.size, group.k
        part_out = cfg.out_channels // 3

        if variant == "sel":
            f_query = TensorService.gather_rows(f, group.query_rows)
            alphas = SPEService.selection_weights(
                f_query, state.param(f"{prefix}.select.weight"), state.params.get(f"{prefix}.select.bias"))
        else:
            alphas = [Tensor(np.ones((m, part_out), dtype=f.dtype)) for _ in BRANCH_ORDER]
        alphas = SPEService.apply_maskout(alphas, epoch, cfg.maskout_epochs)
        masked = SPEService.is_masked(epoch, cfg.maskout_epochs)

        scaled = []
        for b, kind in enumerate(BRANCH_ORDER):
            if masked and b < 2:
                scaled.append(Tensor(np.zeros((m, k, part_out), dtype=f.dtype)))
                continue
            g = SPEService.branch_features(parts[b], group, group.encodings[kind], state,
                                           f"{prefix}.branch{b}", cfg.mlp_layers, training)
            scaled.append(TensorService.scale_neighbors(g, alphas[b]))

        if trace is not None:
            trace.append({"block": prefix, "attention": SPEService.attention(alphas),
                          "positions": group.query_positions})
        return TensorService.max_over_neighbors(TensorService.concat_last(scaled))

    # --- Single-type baselines ---
    @staticmethod
    def pointwise_mlp(f: Tensor, group: LocalGroup, kind: EncodingKind, state: ModelState, prefix: str,
                      layers: int, training: bool) -> Tensor:
        """
        Single-type baseline: Max_j F([f_i, f_j - f_i, P(p_i, p_j)]) on unsliced features
        """
        g = SPEService.branch_features(f, group, group.encodings[kind], state, prefix, layers, training)
        return TensorService.max_over_neighbors(g)

    @staticmethod
    def local_aggregate(f: Tensor, group: LocalGroup, cfg: SPEConfig, state: ModelState, prefix: str,
                        epoch: int, training: bool, variant: str, trace: Optional[list] = None) -> Tensor:
        if variant in SINGLE_KINDS:
            return SPEService.pointwise_mlp(f, group, SINGLE_KINDS[variant], state, f"{prefix}.branch",
                                            cfg.mlp_layers, training)
        return SPEService.spe_mlp(f, group, cfg, state, prefix, epoch, training, variant, trace)

    # --- Residual blocks ---
    @staticmethod
    def init_block(builder: ParameterBuilder, prefix: str, in_channels: int, out_channels: int,
                   strided: bool, cfg: SPEConfig, variant: str):
        mid_in = bottleneck_width(in_channels)
        mid_out = bottleneck_width(out_channels)
        builder.linear(f"{prefix}.reduce.fc", in_channels, mid_in)
        builder.batch_norm(f"{prefix}.reduce.bn", mid_in)
        SPEService.init_local(builder, f"{prefix}.spe",
                              cfg.model_copy(update={"in_channels": mid_in, "out_channels": mid_out}), variant)
        builder.linear(f"{prefix}.expand.fc", mid_out, out_channels)
        builder.batch_norm(f"{prefix}.expand.bn", out_channels, residual=True)
        if strided:
            builder.linear(f"{prefix}.skip", in_channels, out_channels)

    @staticmethod
    def _block(x: Tensor, group: LocalGroup, out_channels: int, strided: bool, cfg: SPEConfig,
               state: ModelState, prefix: str, epoch: int, training: bool, variant: str,
               trace: Optional[list]) -> Tensor:
        in_channels = x.shape[-1]
        mid_in = bottleneck_width(in_channels)
        mid_out = bottleneck_width(out_channels)
        h = ParameterService.linear_bn_relu(x, state, f"{prefix}.reduce", training)
        local_cfg = cfg.model_copy(update={"in_channels": mid_in, "out_channels": mid_out})
        h = SPEService.local_aggregate(h, group, local_cfg, state, f"{prefix}.spe", epoch, training, variant, trace)
        h = ParameterService.linear(h, state, f"{prefix}.expand.fc")
        h = ParameterService.batch_norm(h, state, f"{prefix}.expand.bn", training)
        if strided:
            skip = ParameterService.linear(TensorService.gather_rows(x, group.query_rows), state, f"{prefix}.skip")
        else:
            skip = x
        return TensorService.relu(TensorService.add(h, skip))

    @staticmethod
    def spe_block(x: Tensor, group: LocalGroup, cfg: SPEConfig, state: ModelState, prefix: str,
                  epoch: int, training: bool, variant: str = "sel", trace: Optional[list] = None) -> Tensor:
        """
        reduce FC -> SPE-MLP -> expand FC, identity skip; keeps M and C
        """
        if group.size != x.shape[0]:
            raise ShapeMismatchError(f"{prefix}: plain block needs one query per row")
        return SPEService._block(x, group, x.shape[-1], False, cfg, state, prefix, epoch, training, variant, trace)

    @staticmethod
    def strided_spe_block(x: Tensor, group: LocalGroup, out_channels: int, cfg: SPEConfig, state: ModelState,
                          prefix: str, epoch: int, training: bool, variant: str = "sel",
                          trace: Optional[list] = None) -> Tensor:
        """
        Downsampling block: queries are the sampled rows, neighbors come from the full
        input set; the skip path gathers the sampled rows and projects them to C'.
        """
        return SPEService._block(x, group, out_channels, True, cfg, state, prefix, epoch, training, variant, trace)
