import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.entities import (VARIANTS, CellResult, Dataset, History, PointCloud, Regime, RegimeMatrix,
                             Rotation)
from models.errors import InvalidInputError, SpeNetError, StageOutOfRangeError
from models.settings import AppConfig, NetworkConfig
from models.state import ModelState
from services.dataset_service import DatasetService
from services.network_service import NetworkService
from services.spe_service import SINGLE_KINDS
from services.stats_service import StatsService
from services.training_service import TrainingService

logger = logging.getLogger(__name__)

BRANCH_LABELS = ("CD", "ZRI", "ARI")


@dataclass
class AttentionExport:
    block: str
    positions: np.ndarray     # [M, 3] query positions of the block
    branch_means: np.ndarray  # [M, 3] per-point mean alpha of each branch
    labels: List[str]


@dataclass
class _TrainJob:
    variant: str
    train_rotation: Rotation
    seed: int
    test_rotations: Tuple[Rotation, ...]


def variant_config(app: AppConfig, variant: str, num_classes: int,
                   maskout_epochs: Optional[int] = None) -> NetworkConfig:
    """Network config of one variant; only `sel` trains with a mask-out window by default."""
    if maskout_epochs is None:
        maskout_epochs = app.harness.sel_maskout_epochs if variant == "sel" else 0
    return app.net.model_copy(update={"variant": variant, "maskout_epochs": maskout_epochs,
                                      "num_classes": num_classes})


def _run_job(job: _TrainJob, app: AppConfig, dataset: Dataset, net: NetworkConfig):
    """Train one model and evaluate it under every requested test rotation."""
    try:
        state = NetworkService.init_parameters(net, job.seed)
        train_cfg = app.train.model_copy(update={"seed": job.seed})
        state, history = TrainingService.train(state, dataset, train_cfg, job.train_rotation)
        accuracies = {rot: TrainingService.evaluate(state, dataset, rot, app.harness.eval_seed)
                      for rot in job.test_rotations}
        return job, accuracies, history, None
    except SpeNetError as e:
        logger.error("%s / train %s / seed %d failed: %s", job.variant, job.train_rotation.value, job.seed, e)
        return job, {}, None, f"{e.code}: {e.message}"
    except (ArithmeticError, ValueError, MemoryError) as e:
        logger.exception("%s / train %s / seed %d crashed", job.variant, job.train_rotation.value, job.seed)
        return job, {}, None, f"{type(e).__name__}: {e}"


class MatrixService:
    @staticmethod
    def plan_jobs(variants: Sequence[str], regimes: Sequence[Regime], seeds: Sequence[int]) -> List[_TrainJob]:
        """
        One training per (variant, train rotation, seed); regimes sharing a train
        rotation reuse it with different test rotations
        """
        jobs = []
        for variant in variants:
            by_train: Dict[Rotation, List[Rotation]] = {}
            for regime in regimes:
                tests = by_train.setdefault(regime.train_rotation, [])
                if regime.test_rotation not in tests:
                    tests.append(regime.test_rotation)
            for train_rotation, tests in by_train.items():
                for seed in seeds:
                    jobs.append(_TrainJob(variant, train_rotation, int(seed), tuple(tests)))
        return jobs

    @staticmethod
    def run_regime_matrix(app: AppConfig, dataset: Optional[Dataset] = None,
                          variants: Optional[Sequence[str]] = None, regimes: Optional[Sequence[str]] = None,
                          seeds: Optional[Sequence[int]] = None, workers: Optional[int] = None) -> RegimeMatrix:
        """
        Train and evaluate every (variant, regime) cell over the seeds. A failing
        training marks its cells failed and the run continues.
        """
        variants = list(variants or app.harness.variants)
        unknown = [v for v in variants if v not in VARIANTS]
        if unknown:
            raise InvalidInputError(f"unknown variants {unknown}; expected from {list(VARIANTS)}")
        regime_objs = [Regime.from_name(r) for r in (regimes or app.harness.regimes)]
        seeds = list(seeds if seeds is not None else app.harness.seeds)
        workers = workers or app.harness.workers
        dataset = dataset or DatasetService.load_dataset(app.data)

        matrix = RegimeMatrix(num_classes=dataset.num_classes)
        configs = {v: variant_config(app, v, dataset.num_classes) for v in variants}
        for v in variants:
            matrix.parameter_counts[v] = NetworkService.count_parameters(configs[v])

        jobs = MatrixService.plan_jobs(variants, regime_objs, seeds)
        logger.info("Regime matrix: %d cells, %d trainings, %d worker(s)",
                    len(variants) * len(regime_objs), len(jobs), workers)
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_job, job, app, dataset, configs[job.variant]) for job in jobs]
                outcomes = [f.result() for f in futures]
        else:
            outcomes = [_run_job(job, app, dataset, configs[job.variant]) for job in jobs]

        # outcomes follow job order, so per-seed lists do not depend on scheduling
        for variant in variants:
            for regime in regime_objs:
                matrix.cells[(variant, regime.name)] = CellResult(variant=variant, regime=regime)
        for job, accuracies, history, error in outcomes:
            if history is not None:
                matrix.histories[(job.variant, job.train_rotation.value, job.seed)] = history
            for regime in regime_objs:
                if regime.train_rotation != job.train_rotation:
                    continue
                cell = matrix.cells[(job.variant, regime.name)]
                if error is not None:
                    cell.failed, cell.error = True, error
                else:
                    cell.accuracies.append(accuracies[regime.test_rotation])
        for (variant, name), cell in sorted(matrix.cells.items()):
            if cell.failed:
                cell.accuracies = []
            logger.info("%-5s %-6s %s", variant, name,
                        "failed" if cell.failed else f"{cell.mean_accuracy:.4f}")
        return matrix

    @staticmethod
    def loss_histories(matrix: RegimeMatrix, train_rotation: Rotation, seed: Optional[int] = None) -> Dict[str, History]:
        """Per-variant histories of one train rotation (lowest seed unless one is given)."""
        out: Dict[str, History] = {}
        for (variant, rotation, s), history in sorted(matrix.histories.items()):
            if rotation == train_rotation.value and (seed is None or s == seed) and variant not in out:
                out[variant] = history
        return out

    @staticmethod
    def sweep_maskout(app: AppConfig, values: Sequence[int], dataset: Optional[Dataset] = None,
                      seed: Optional[int] = None) -> Dict[int, Dict[str, float]]:
        """
        Train `sel` under Z rotations for each mask-out length; report Z/Z and Z/SO3 accuracy
        """
        dataset = dataset or DatasetService.load_dataset(app.data)
        seed = app.harness.seeds[0] if seed is None else seed
        results: Dict[int, Dict[str, float]] = {}
        for t in values:
            if t < 0:
                raise InvalidInputError(f"mask-out epochs must be >= 0, got {t}")
            net = variant_config(app, "sel", dataset.num_classes, maskout_epochs=int(t))
            job = _TrainJob("sel", Rotation.Z, seed, (Rotation.Z, Rotation.SO3))
            _, accuracies, _, error = _run_job(job, app, dataset, net)
            if error is not None:
                logger.error("mask-out %d failed: %s", t, error)
                continue
            results[int(t)] = {"zz": accuracies[Rotation.Z], "zso3": accuracies[Rotation.SO3]}
            logger.info("mask-out %d: zz=%.4f zso3=%.4f", t, results[int(t)]["zz"], results[int(t)]["zso3"])
        return results

    @staticmethod
    def export_attention(model: ModelState, cloud: PointCloud, stage: int = 0) -> AttentionExport:
        """
        Attention of the stage-th strided block (0 = the first one) on one cloud in eval mode;
        each point is labelled with the branch of largest mean weight
        """
        if model.config.variant in SINGLE_KINDS:
            raise InvalidInputError(f"variant {model.config.variant!r} has no encoding selection to export")
        trace: list = []
        NetworkService.forward_batch([cloud], model, training=False, trace=trace)
        strided = [entry for entry in trace if entry.get("strided")]
        if not 0 <= stage < len(strided):
            raise StageOutOfRangeError(f"stage {stage} out of range; the network has {len(strided)} strided blocks")
        entry = strided[stage]
        means = entry["attention"].branch_means()
        labels = MatrixService.attention_labels(means)
        counts = StatsService.label_distribution(labels, BRANCH_LABELS)
        logger.info("attention of %s: %s", entry["block"], counts)
        return AttentionExport(block=entry["block"], positions=np.asarray(entry["positions"]),
                               branch_means=means, labels=labels)

    @staticmethod
    def attention_labels(branch_means: np.ndarray) -> List[str]:
        return [BRANCH_LABELS[i] for i in np.argmax(branch_means, axis=1)]
