import logging
from typing import Callable, Dict, List, Tuple

import numpy as np

from models.entities import BRANCH_ORDER, LocalGroup
from models.settings import NetworkConfig, SPEConfig
from models.state import ModelState
from models.tensor import Tensor
from services.encoding_service import EncodingService
from services.neighborhood_service import NeighborhoodService
from services.parameter_service import ParameterBuilder
from services.spe_service import SPEService
from services.tensor_service import RunningStats, TensorService

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_STEP = 1e-5
# composed blocks hold many ReLU / max kinks; a shorter step rarely straddles one
_STEPS = {"spe_mlp": 1e-6}

Case = Tuple[Callable[[Tensor], Tensor], Tensor]


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar sum(w * out); random weights keep every output entry in play."""
    return TensorService.sum(TensorService.mul(out, Tensor(w)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def _distinct_values(rng, shape, gap=0.05):
    """Entries far apart from each other, so max/argmax choices survive a small step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, 0.01, n)).reshape(shape) - n * gap / 2


def small_group(rng: np.random.Generator, points: int = 32, k: int = 4, radius: float = 0.4) -> LocalGroup:
    """Neighborhoods and all three encodings of a random cloud, every point a query."""
    pos = rng.uniform(-1.0, 1.0, size=(points, 3))
    query = np.arange(points)
    nbrs = NeighborhoodService.ball_query_positions(pos, pos, radius, k)
    enc = EncodingService.encode_positions(pos, query, nbrs, radius, BRANCH_ORDER)
    return LocalGroup(query_rows=query, neighbor_rows=nbrs, encodings=enc, query_positions=pos)


def small_state(cfg: SPEConfig, seed: int, variant: str = "sel", prefix: str = "spe") -> ModelState:
    builder = ParameterBuilder(seed, dtype="float64")
    SPEService.init_local(builder, prefix, cfg, variant)
    net = NetworkConfig(stage_channels=[6], input_points=8, num_classes=2, dtype="float64", variant=variant)
    return ModelState(params=builder.params, buffers=builder.buffers, config=net, seed=seed)


class GradCheckService:
    @staticmethod
    def cases(seed: int) -> Dict[str, Case]:
        """One differentiable function per operation, each with a random float64 input."""
        rng = np.random.default_rng(seed)
        m, k, c = 5, 4, 6
        w_lin = rng.standard_normal((4, c))
        b_lin = rng.standard_normal(4)
        x_lin = rng.standard_normal((m, c))
        gamma, beta = rng.uniform(0.5, 1.5, c), rng.standard_normal(c)
        stats = RunningStats(rng.uniform(-0.5, 0.5, c), rng.uniform(0.5, 2.0, c))
        g3 = rng.standard_normal((m, k, c))
        alpha = rng.uniform(0.1, 1.0, (m, c))
        rows = rng.integers(0, m, size=(m, k))
        labels = rng.integers(0, c, size=m)

        def w(shape):
            return rng.standard_normal(shape)

        out_w = {name: w(shape) for name, shape in {
            "lin": (m, 4), "bn": (m, k, c), "gk": (m, k, c), "g": (m, c), "cat": (m, 2 * c),
            "slice": (m, 3), "mkc": (m, k, c), "pad": (m, c + 3), "resh": (m * k, c),
        }.items()}
        bn = lambda x, training: TensorService.batch_norm(
            x, RunningStats(stats.mean.copy(), stats.var.copy()), Tensor(gamma), Tensor(beta), training)

        cases: Dict[str, Case] = {
            "linear.x": (lambda x: _weighted(TensorService.linear(x, Tensor(w_lin), Tensor(b_lin)), out_w["lin"]),
                         Tensor(x_lin)),
            "linear.weight": (lambda W: _weighted(TensorService.linear(Tensor(x_lin), W, Tensor(b_lin)), out_w["lin"]),
                              Tensor(w_lin)),
            "linear.bias": (lambda b: _weighted(TensorService.linear(Tensor(x_lin), Tensor(w_lin), b), out_w["lin"]),
                            Tensor(b_lin)),
            "batch_norm.train": (lambda x: _weighted(bn(x, True), out_w["bn"]), Tensor(g3)),
            "batch_norm.eval": (lambda x: _weighted(bn(x, False), out_w["bn"]), Tensor(g3)),
            "batch_norm.gamma": (lambda gm: _weighted(TensorService.batch_norm(
                Tensor(g3), RunningStats(stats.mean.copy(), stats.var.copy()), gm, Tensor(beta), True), out_w["bn"]),
                Tensor(gamma)),
            "relu": (lambda x: _weighted(TensorService.relu(x), out_w["mkc"]),
                     Tensor(_away_from_zero(rng, (m, k, c)))),
            "sigmoid": (lambda x: _weighted(TensorService.sigmoid(x), out_w["mkc"]), Tensor(g3)),
            "add": (lambda x: _weighted(TensorService.add(x, Tensor(g3)), out_w["mkc"]), Tensor(w((m, k, c)))),
            "sub": (lambda x: _weighted(TensorService.sub(Tensor(g3), x), out_w["mkc"]), Tensor(w((m, k, c)))),
            "mul": (lambda x: _weighted(TensorService.mul(x, x), out_w["mkc"]), Tensor(g3)),
            "scale_neighbors.g": (lambda x: _weighted(TensorService.scale_neighbors(x, Tensor(alpha)), out_w["mkc"]),
                                  Tensor(g3)),
            "scale_neighbors.alpha": (lambda a: _weighted(TensorService.scale_neighbors(Tensor(g3), a), out_w["mkc"]),
                                      Tensor(alpha)),
            "gather_rows": (lambda x: _weighted(TensorService.gather_rows(x, rows), out_w["gk"]), Tensor(w((m, c)))),
            "max_over_neighbors": (lambda x: _weighted(TensorService.max_over_neighbors(x), out_w["g"]),
                                   Tensor(_distinct_values(rng, (m, k, c)))),
            "concat_last": (lambda x: _weighted(TensorService.concat_last([x, TensorService.relu(x)]), out_w["cat"]),
                            Tensor(_away_from_zero(rng, (m, c)))),
            "slice_last": (lambda x: _weighted(TensorService.slice_last(x, 2)[1], out_w["slice"]), Tensor(w((m, c)))),
            "pad_last": (lambda x: _weighted(TensorService.pad_last(x, c + 3), out_w["pad"]), Tensor(w((m, c)))),
            "reshape": (lambda x: _weighted(TensorService.reshape(x, (m * k, c)), out_w["resh"]), Tensor(g3)),
            "dropout": (lambda x: _weighted(TensorService.dropout(x, 0.5, np.random.default_rng(seed), True),
                                            out_w["mkc"]), Tensor(g3)),
            "cross_entropy": (lambda z: TensorService.cross_entropy(z, labels, 0.1), Tensor(w((m, c)))),
        }
        cases["spe_mlp"] = GradCheckService.spe_mlp_case(rng)
        return cases

    @staticmethod
    def spe_mlp_case(rng: np.random.Generator, variant: str = "sel") -> Case:
        cfg = SPEConfig(in_channels=6, out_channels=6, k=4, radius=0.4, mlp_layers=1)
        group = small_group(rng, points=16, k=cfg.k, radius=cfg.radius)
        state = small_state(cfg, int(rng.integers(2 ** 31)), variant)
        out_w = rng.standard_normal((group.size, cfg.out_channels))
        f = rng.standard_normal((group.size, cfg.in_channels))

        def fn(x: Tensor) -> Tensor:
            return _weighted(SPEService.spe_mlp(x, group, cfg, state, "spe", epoch=0, training=True,
                                                variant=variant), out_w)

        return fn, Tensor(f)

    @staticmethod
    def run_suite(seed: int = 0, trials: int = 10, tolerance: float = GRADCHECK_TOLERANCE) -> List[Dict]:
        """
        Worst relative error per operation over `trials` random inputs
        """
        worst: Dict[str, float] = {}
        for trial in range(trials):
            for name, (fn, x) in GradCheckService.cases(seed + trial).items():
                err = TensorService.grad_check(fn, x, step=_STEPS.get(name, GRADCHECK_STEP))
                worst[name] = max(worst.get(name, 0.0), err)
        results = [{"op": name, "max_rel_error": err, "passed": err <= tolerance} for name, err in worst.items()]
        for r in results:
            logger.log(logging.INFO if r["passed"] else logging.WARNING, "%-24s %.3e", r["op"], r["max_rel_error"])
        return results
