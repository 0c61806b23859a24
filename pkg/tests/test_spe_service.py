import numpy as np
import pytest

from models.entities import BRANCH_ORDER, LocalGroup
from models.errors import ShapeMismatchError
from models.settings import NetworkConfig, SPEConfig
from models.state import ModelState
from models.tensor import Tape, Tensor
from services.encoding_service import EncodingService
from services.geometry_service import GeometryService
from services.gradcheck_service import small_group, small_state
from services.neighborhood_service import NeighborhoodService
from services.parameter_service import ParameterBuilder
from services.spe_service import SPEService, bottleneck_width, encoding_kinds
from services.tensor_service import TensorService

CFG = SPEConfig(in_channels=6, out_channels=6, k=4, radius=0.4)


def _group(positions, radius=0.4, k=4, queries=None):
    queries = np.arange(len(positions)) if queries is None else queries
    nbrs = NeighborhoodService.ball_query_positions(positions, positions[queries], radius, k)
    enc = EncodingService.encode_positions(positions, queries, nbrs, radius, BRANCH_ORDER)
    return LocalGroup(query_rows=queries, neighbor_rows=nbrs, encodings=enc, query_positions=positions[queries])


def _randomize(state: ModelState, rng):
    for p in state.params.values():
        p.data = rng.normal(0.0, 0.5, size=p.shape)
    for name, b in state.buffers.items():
        b[...] = rng.uniform(0.5, 1.5, size=b.shape) if name.endswith("running_var") else rng.normal(size=b.shape)


def _scalar_spe_mlp(f, group, state, cfg):
    """Explicit loops over queries, branches, channels and neighbors (eval mode)."""
    part_in, part_out = cfg.padded_in_channels // 3, cfg.out_channels // 3
    padded = np.zeros((f.shape[0], cfg.padded_in_channels))
    padded[:, :cfg.in_channels] = f
    w_sel, b_sel = state.param("spe.select.weight").data, state.param("spe.select.bias").data
    out = np.zeros((group.size, cfg.out_channels))
    for m in range(group.size):
        q = group.query_rows[m]
        alpha = 1.0 / (1.0 + np.exp(-(w_sel @ f[q] + b_sel)))
        for b, kind in enumerate(BRANCH_ORDER):
            pre = f"spe.branch{b}.layer0"
            w, bias = state.param(f"{pre}.fc.weight").data, state.param(f"{pre}.fc.bias").data
            gamma, beta = state.param(f"{pre}.bn.gamma").data, state.param(f"{pre}.bn.beta").data
            mean, var = state.buffer(f"{pre}.bn.running_mean"), state.buffer(f"{pre}.bn.running_var")
            f_i = padded[q, b * part_in:(b + 1) * part_in]
            for c in range(part_out):
                best = -np.inf
                for k in range(group.k):
                    f_j = padded[group.neighbor_rows[m, k], b * part_in:(b + 1) * part_in]
                    x = np.concatenate([f_i, f_j - f_i, group.encodings[kind][m, k]])
                    h = sum(w[c, t] * x[t] for t in range(x.size)) + bias[c]
                    h = (h - mean[c]) / np.sqrt(var[c] + 1e-5) * gamma[c] + beta[c]
                    best = max(best, max(h, 0.0) * alpha[b * part_out + c])
                out[m, b * part_out + c] = best
    return out


def test_bottleneck_width_is_a_multiple_of_three():
    assert [bottleneck_width(c) for c in (6, 12, 36, 576)] == [3, 6, 18, 288]


def test_encoding_kinds_per_variant():
    assert encoding_kinds("zri") == [BRANCH_ORDER[1]]
    assert encoding_kinds("sel") == list(BRANCH_ORDER)


def test_mask_window():
    assert SPEService.is_masked(0, 3) and SPEService.is_masked(2, 3)
    assert not SPEService.is_masked(3, 3)
    assert not SPEService.is_masked(0, 0)


def test_spe_mlp_output_shape(rng):
    group = small_group(rng, points=16, k=4)
    state = small_state(CFG, seed=1)
    out = SPEService.spe_mlp(Tensor(rng.normal(size=(16, 6))), group, CFG, state, "spe", epoch=0, training=False)
    assert out.shape == (16, 6)
    assert np.all(out.data >= 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_spe_mlp_matches_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    group = small_group(rng, points=32, k=CFG.k, radius=CFG.radius)
    state = small_state(CFG, seed=seed)
    _randomize(state, rng)
    f = rng.normal(size=(32, 6))
    out = SPEService.spe_mlp(Tensor(f), group, CFG, state, "spe", epoch=0, training=False)
    np.testing.assert_allclose(out.data, _scalar_spe_mlp(f, group, state, CFG), atol=1e-5)


def test_spe_mlp_pads_inputs_not_divisible_by_three(rng):
    cfg = SPEConfig(in_channels=4, out_channels=6, k=4, radius=0.4)
    group = small_group(rng, points=16, k=4)
    state = small_state(cfg, seed=2)
    assert state.param("spe.branch0.layer0.fc.weight").shape == (2, 2 * 2 + 3)
    out = SPEService.spe_mlp(Tensor(rng.normal(size=(16, 4))), group, cfg, state, "spe", epoch=0, training=False)
    assert out.shape == (16, 6)


def test_mask_out_zeroes_two_weights_and_their_gradients(rng):
    cfg = CFG.model_copy(update={"maskout_epochs": 3})
    group = small_group(rng, points=16, k=4)
    state = small_state(cfg, seed=3)
    trace = []
    with Tape() as tape:
        out = SPEService.spe_mlp(Tensor(rng.normal(size=(16, 6))), group, cfg, state, "spe",
                                 epoch=0, training=True, trace=trace)
        loss = TensorService.sum(out)
    tape.backward(loss)
    attention = trace[0]["attention"]
    assert np.all(attention.alpha1 == 0.0) and np.all(attention.alpha2 == 0.0)
    assert np.all(attention.alpha3 > 0.0)
    for name, p in state.params.items():
        if name.startswith(("spe.branch0", "spe.branch1")):
            assert p.grad is None, name
    assert state.param("spe.branch2.layer0.fc.weight").grad is not None
    select = state.param("spe.select.weight").grad
    np.testing.assert_array_equal(select[:4], 0.0)
    assert np.any(select[4:] != 0.0)


def test_weights_return_after_the_mask_window(rng):
    cfg = CFG.model_copy(update={"maskout_epochs": 3})
    group = small_group(rng, points=16, k=4)
    state = small_state(cfg, seed=3)
    trace = []
    SPEService.spe_mlp(Tensor(rng.normal(size=(16, 6))), group, cfg, state, "spe", epoch=3, training=False,
                       trace=trace)
    assert np.all(trace[0]["attention"].alpha1 > 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_masked_spe_mlp_is_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    cfg = CFG.model_copy(update={"maskout_epochs": 10 ** 6})
    positions = rng.uniform(-1, 1, size=(32, 3))
    rotated = positions @ GeometryService.random_rotation_so3(seed).entries.T
    r = np.linalg.norm(positions, axis=1, keepdims=True)
    f = Tensor(r * np.arange(1.0, 7.0))
    state = small_state(cfg, seed=seed)
    _randomize(state, rng)
    a = SPEService.spe_mlp(f, _group(positions), cfg, state, "spe", epoch=0, training=False)
    b = SPEService.spe_mlp(f, _group(rotated), cfg, state, "spe", epoch=0, training=False)
    np.testing.assert_allclose(a.data, b.data, atol=1e-9)


def test_fused_variant_uses_unit_weights(rng):
    group = small_group(rng, points=16, k=4)
    state = small_state(CFG, seed=4, variant="fused")
    assert "spe.select.weight" not in state.params
    trace = []
    SPEService.spe_mlp(Tensor(rng.normal(size=(16, 6))), group, CFG, state, "spe", epoch=0, training=False,
                       variant="fused", trace=trace)
    np.testing.assert_array_equal(trace[0]["attention"].values, 1.0)


@pytest.mark.parametrize("variant", ["cd", "zri", "ari"])
def test_single_type_aggregation(rng, variant):
    group = small_group(rng, points=16, k=4)
    state = small_state(CFG, seed=5, variant=variant)
    out = SPEService.local_aggregate(Tensor(rng.normal(size=(16, 6))), group, CFG, state, "spe", epoch=0,
                                     training=False, variant=variant)
    assert out.shape == (16, 6)
    assert not any(name.startswith("spe.branch0") for name in state.params)


def test_selection_weights_check_width(rng):
    with pytest.raises(ShapeMismatchError):
        SPEService.selection_weights(Tensor(rng.normal(size=(4, 5))), Tensor(np.ones((6, 6))), None)


def test_spe_mlp_rejects_wrong_channel_count(rng):
    group = small_group(rng, points=16, k=4)
    with pytest.raises(ShapeMismatchError):
        SPEService.spe_mlp(Tensor(rng.normal(size=(16, 9))), group, CFG, small_state(CFG, seed=0), "spe",
                           epoch=0, training=False)


# --- residual blocks ---
def _block_state(in_c, out_c, strided, zero_init_residual=False):
    cfg = SPEConfig(in_channels=in_c, out_channels=in_c, k=4, radius=0.4)
    builder = ParameterBuilder(0, dtype="float64", zero_init_residual=zero_init_residual)
    SPEService.init_block(builder, "blk", in_c, out_c, strided, cfg, "sel")
    net = NetworkConfig(stage_channels=[6], input_points=8, num_classes=2, dtype="float64")
    return cfg, ModelState(params=builder.params, buffers=builder.buffers, config=net, seed=0)


def test_plain_block_keeps_shape(rng):
    cfg, state = _block_state(12, 12, strided=False)
    x = Tensor(rng.normal(size=(16, 12)))
    out = SPEService.spe_block(x, _group(rng.uniform(-1, 1, size=(16, 3))), cfg, state, "blk", 0, False)
    assert out.shape == (16, 12)


def test_zero_initialized_residual_block_is_relu_of_input(rng):
    cfg, state = _block_state(12, 12, strided=False, zero_init_residual=True)
    x = rng.normal(size=(16, 12))
    out = SPEService.spe_block(Tensor(x), _group(rng.uniform(-1, 1, size=(16, 3))), cfg, state, "blk", 0, False)
    np.testing.assert_array_equal(out.data, np.maximum(x, 0.0))


def test_strided_block_downsamples_and_widens(rng):
    cfg, state = _block_state(12, 24, strided=True)
    positions = rng.uniform(-1, 1, size=(16, 3))
    sampled = NeighborhoodService.farthest_point_sample(positions, 8)
    group = _group(positions, queries=sampled)
    out = SPEService.strided_spe_block(Tensor(rng.normal(size=(16, 12))), group, 24, cfg, state, "blk", 0, False)
    assert out.shape == (8, 24)
    assert state.param("blk.skip.weight").shape == (24, 12)


def test_plain_block_rejects_subsampled_groups(rng):
    cfg, state = _block_state(12, 12, strided=False)
    positions = rng.uniform(-1, 1, size=(16, 3))
    group = _group(positions, queries=np.arange(8))
    with pytest.raises(ShapeMismatchError):
        SPEService.spe_block(Tensor(rng.normal(size=(16, 12))), group, cfg, state, "blk", 0, False)
