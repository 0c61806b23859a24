import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from models.entities import LocalGroup, PointCloud
from models.errors import InvalidInputError
from models.settings import NetworkConfig, SPEConfig, build_settings
from models.state import ModelState
from models.tensor import Tensor
from services.encoding_service import EncodingService
from services.neighborhood_service import NeighborhoodService
from services.parameter_service import ParameterBuilder, ParameterService
from services.spe_service import SPEService, encoding_kinds
from services.tensor_service import TensorService

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockSpec:
    name: str
    stage: int          # 0-based
    in_channels: int
    out_channels: int
    strided: bool
    transition: bool    # first block of its stage (queries may be a sampled subset)


@dataclass
class NetworkPlan:
    """Geometry of one batch: neighborhoods and encodings for every local aggregation."""
    batch_size: int
    embed_group: LocalGroup
    transition_groups: List[LocalGroup]
    stage_groups: List[LocalGroup]
    level_sizes: List[int]  # points per cloud at each level (level 0 = input)


class NetworkService:
    # --- Architecture layout ---
    @staticmethod
    def layout(config: NetworkConfig) -> List[BlockSpec]:
        specs = []
        prev_c, prev_n = config.stage_channels[0], config.input_points
        for t, (c, n, blocks) in enumerate(zip(config.stage_channels, config.stage_points, config.blocks_per_stage)):
            for j in range(blocks):
                first = j == 0
                strided = first and (n < prev_n or c != prev_c)
                specs.append(BlockSpec(f"stage{t}.block{j}", t, prev_c if first else c, c, strided, first))
            prev_c, prev_n = c, n
        return specs

    @staticmethod
    def spe_config(config: NetworkConfig, stage: int) -> SPEConfig:
        c = config.stage_channels[stage]
        return SPEConfig(in_channels=c, out_channels=c, k=config.k, radius=config.stage_radii[stage],
                         mlp_layers=config.mlp_layers, maskout_epochs=config.maskout_epochs)

    # --- Parameters ---
    @staticmethod
    def init_parameters(config: NetworkConfig, seed: int) -> ModelState:
        """
        Deterministic fan-in uniform weights, zero biases, unit / zero normalization affine
        """
        config = build_settings(NetworkConfig, config.model_dump())
        builder = ParameterBuilder(seed, config.dtype, config.zero_init_residual)
        c1 = config.stage_channels[0]
        builder.linear("embed.fc", 3, c1)
        SPEService.init_local(builder, "embed.spe", NetworkService.spe_config(config, 0), config.variant)
        for spec in NetworkService.layout(config):
            SPEService.init_block(builder, spec.name, spec.in_channels, spec.out_channels, spec.strided,
                                  NetworkService.spe_config(config, spec.stage), config.variant)
        width = config.stage_channels[-1]
        for i, hidden in enumerate(config.head_widths):
            builder.linear(f"head.layer{i}.fc", width, hidden)
            builder.batch_norm(f"head.layer{i}.bn", hidden)
            width = hidden
        builder.linear("head.out", width, config.num_classes)
        return ModelState(params=builder.params, buffers=builder.buffers, config=config, seed=int(seed))

    @staticmethod
    def count_parameters(config: NetworkConfig) -> int:
        return NetworkService.init_parameters(config, 0).parameter_count()

    # --- Geometry plan ---
    @staticmethod
    def _group(positions: np.ndarray, query_idx: np.ndarray, radius: float, k: int, kinds,
               row_offset: int) -> LocalGroup:
        nbrs = NeighborhoodService.ball_query_positions(positions, positions[query_idx], radius, k)
        enc = EncodingService.encode_positions(positions, query_idx, nbrs, radius, kinds)
        return LocalGroup(query_rows=query_idx + row_offset, neighbor_rows=nbrs + row_offset,
                          encodings=enc, query_positions=positions[query_idx])

    @staticmethod
    def _stack(groups: Sequence[LocalGroup]) -> LocalGroup:
        kinds = list(groups[0].encodings)
        return LocalGroup(
            query_rows=np.concatenate([g.query_rows for g in groups]),
            neighbor_rows=np.concatenate([g.neighbor_rows for g in groups]),
            encodings={kind: np.concatenate([g.encodings[kind] for g in groups]) for kind in kinds},
            query_positions=np.concatenate([g.query_positions for g in groups]),
        )

    @staticmethod
    def build_plan(clouds: Sequence[PointCloud], config: NetworkConfig) -> NetworkPlan:
        if not clouds:
            raise InvalidInputError("forward needs at least one cloud")
        n = config.input_points
        kinds = encoding_kinds(config.variant)
        embed, transitions, stages = [], [[] for _ in config.stage_points], [[] for _ in config.stage_points]
        for b, cloud in enumerate(clouds):
            if cloud.size != n:
                raise InvalidInputError(f"cloud {cloud.id!r} has {cloud.size} points, network expects {n}")
            pos = cloud.positions
            embed.append(NetworkService._group(pos, np.arange(n), config.stage_radii[0], config.k, kinds, b * n))
            prev_n = n
            for t, n_t in enumerate(config.stage_points):
                radius = config.stage_radii[t]
                sampled = (NeighborhoodService.farthest_point_sample(pos, n_t) if n_t < prev_n
                           else np.arange(prev_n))
                transitions[t].append(NetworkService._group(pos, sampled, radius, config.k, kinds, b * prev_n))
                pos = pos[sampled]
                stages[t].append(NetworkService._group(pos, np.arange(n_t), radius, config.k, kinds, b * n_t))
                prev_n = n_t
        return NetworkPlan(
            batch_size=len(clouds),
            embed_group=NetworkService._stack(embed),
            transition_groups=[NetworkService._stack(g) for g in transitions],
            stage_groups=[NetworkService._stack(g) for g in stages],
            level_sizes=[n] + list(config.stage_points),
        )

    # --- Forward ---
    @staticmethod
    def embedding_input(positions: np.ndarray, mode: str) -> np.ndarray:
        if mode == "xyz":
            return positions
        r = np.sqrt((positions ** 2).sum(axis=1, keepdims=True))
        return np.concatenate([r, r ** 2, r ** 3], axis=1)

    @staticmethod
    def embed_points(clouds: Union[PointCloud, Sequence[PointCloud]], state: ModelState, training: bool = False,
                     plan: Optional[NetworkPlan] = None, trace: Optional[list] = None) -> Tensor:
        """
        Shared linear embedding followed by one local aggregation: [B*N, C_1]
        """
        clouds = [clouds] if isinstance(clouds, PointCloud) else list(clouds)
        config = state.config
        plan = plan or NetworkService.build_plan(clouds, config)
        raw = np.concatenate([NetworkService.embedding_input(c.positions, config.embed_input) for c in clouds])
        f = ParameterService.linear(Tensor(raw.astype(state.dtype)), state, "embed.fc")
        return SPEService.local_aggregate(f, plan.embed_group, NetworkService.spe_config(config, 0), state,
                                          "embed.spe", state.epoch, training, config.variant, trace)

    @staticmethod
    def forward_batch(clouds: Sequence[PointCloud], state: ModelState, training: bool = False,
                      rng: Optional[np.random.Generator] = None, trace: Optional[list] = None,
                      plan: Optional[NetworkPlan] = None) -> Tensor:
        """
        Logits [B, c] for a batch of clouds sharing one point count
        """
        config = state.config
        plan = plan or NetworkService.build_plan(clouds, config)
        x = NetworkService.embed_points(clouds, state, training, plan, trace)
        for spec in NetworkService.layout(config):
            group = plan.transition_groups[spec.stage] if spec.transition else plan.stage_groups[spec.stage]
            cfg = NetworkService.spe_config(config, spec.stage)
            if spec.strided:
                x = SPEService.strided_spe_block(x, group, spec.out_channels, cfg, state, spec.name,
                                                 state.epoch, training, config.variant, trace)
            else:
                x = SPEService.spe_block(x, group, cfg, state, spec.name, state.epoch, training,
                                         config.variant, trace)
            if trace is not None and trace and trace[-1]["block"] == f"{spec.name}.spe":
                trace[-1]["strided"] = spec.strided

        pooled = TensorService.max_over_neighbors(
            TensorService.reshape(x, (plan.batch_size, plan.level_sizes[-1], x.shape[-1])))
        h = pooled
        for i in range(len(config.head_widths)):
            h = ParameterService.linear_bn_relu(h, state, f"head.layer{i}", training)
            h = TensorService.dropout(h, config.dropout, rng, training)
        return ParameterService.linear(h, state, "head.out")

    @staticmethod
    def forward(cloud: PointCloud, state: ModelState, mode: str = "eval") -> np.ndarray:
        """
        Logits of one cloud; eval mode uses running statistics and no dropout
        """
        if mode not in ("eval", "train"):
            raise InvalidInputError(f"mode must be 'eval' or 'train', got {mode!r}")
        rng = np.random.default_rng(state.seed) if mode == "train" else None
        return NetworkService.forward_batch([cloud], state, mode == "train", rng).data[0]

    @staticmethod
    def predict(clouds: Sequence[PointCloud], state: ModelState, batch_size: int = 32) -> np.ndarray:
        out = []
        for start in range(0, len(clouds), batch_size):
            out.append(NetworkService.forward_batch(clouds[start:start + batch_size], state, False).data)
        return np.concatenate(out) if out else np.zeros((0, state.config.num_classes))
