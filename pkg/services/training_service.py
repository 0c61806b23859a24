import logging
import math
import sys
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from models.entities import Dataset, History, PointCloud, Rotation
from models.errors import EmptyDatasetError, InvalidInputError, TrainingDivergedError
from models.settings import TrainConfig
from models.state import ModelState
from models.tensor import Parameter, Tape
from services.geometry_service import GeometryService
from services.network_service import NetworkService
from services.spe_service import SPEService
from services.tensor_service import TensorService

logger = logging.getLogger(__name__)

# stream tags mixed into derive_seed so shuffling, dropout and augmentation never share draws
_SHUFFLE, _DROPOUT, _AUGMENT, _EVAL = 0, 1, 2, 3


# --- Optimizers ---
def _hold(keep: Optional[np.ndarray], old, new: np.ndarray) -> np.ndarray:
    """`new` except where `keep` is set"""
    if keep is None:
        return new
    return np.where(keep, old, new).astype(new.dtype)


class SGD:
    """Momentum SGD with weight decay added to the gradient."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Parameter], lr: float, held: Optional[Dict[str, np.ndarray]] = None):
        held = held or {}
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            previous = self.velocity.get(name)
            v = g if previous is None else self.momentum * previous + g
            keep = held.get(name)
            v = _hold(keep, 0.0 if previous is None else previous, v)
            self.velocity[name] = v
            p.data = _hold(keep, p.data, (p.data - lr * v).astype(p.dtype))


class AdamW:
    """Adam with decoupled weight decay; moments advance only for parameters that received a gradient."""

    def __init__(self, betas: Tuple[float, float], eps: float, weight_decay: float):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def step(self, params: Dict[str, Parameter], lr: float, held: Optional[Dict[str, np.ndarray]] = None):
        held = held or {}
        for name, p in params.items():
            if p.grad is None:
                continue
            keep = held.get(name)
            t = self.t.get(name, 0) + 1
            m = _hold(keep, self.m.get(name, 0.0), self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * p.grad)
            v = _hold(keep, self.v.get(name, 0.0),
                      self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * p.grad * p.grad)
            self.m[name], self.v[name], self.t[name] = m, v, t
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = _hold(keep, p.data, (p.data - lr * update).astype(p.dtype))


class TrainingService:
    @staticmethod
    def make_optimizer(cfg: TrainConfig):
        if cfg.optimizer == "adamw":
            return AdamW(cfg.betas, cfg.eps, cfg.weight_decay)
        return SGD(cfg.momentum, cfg.weight_decay)

    @staticmethod
    def learning_rate(cfg: TrainConfig, epoch: int) -> float:
        """Cosine annealing from cfg.lr towards 0 over the epoch budget, or constant."""
        if cfg.schedule == "constant":
            return cfg.lr
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs))

    @staticmethod
    def augment(cloud: PointCloud, cfg: TrainConfig, rotation: Rotation, seed: int) -> PointCloud:
        """
        Anisotropic scale, Gaussian noise, then a fresh rotation of the requested kind
        """
        rng = np.random.default_rng(seed)
        pos = cloud.positions
        if cfg.augment_scale:
            pos = pos * rng.uniform(cfg.scale_low, cfg.scale_high, size=3)
        if cfg.noise_sigma > 0:
            pos = pos + rng.normal(0.0, cfg.noise_sigma, size=pos.shape)
        out = cloud.with_positions(pos)
        return GeometryService.rotate(out, GeometryService.random_rotation(rotation, GeometryService.derive_seed(seed, 1)))

    @staticmethod
    def batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
        """Shuffled index batches; a trailing batch of one sample joins the previous batch."""
        order = rng.permutation(n)
        chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        if len(chunks) > 1 and len(chunks[-1]) == 1:
            chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
        return chunks

    @staticmethod
    def _split(data: Union[Dataset, Sequence[PointCloud]], split: str) -> List[PointCloud]:
        if isinstance(data, Dataset):
            return list(getattr(data, split))
        return list(data)

    @staticmethod
    def _show_progress(cfg: TrainConfig) -> bool:
        return cfg.progress and sys.stderr.isatty()

    @staticmethod
    def train(model: ModelState, data: Union[Dataset, Sequence[PointCloud]], cfg: TrainConfig,
              train_rotation: Rotation = Rotation.NONE, eval_data=None,
              eval_rotation: Optional[Rotation] = None, eval_seed: int = 0) -> Tuple[ModelState, History]:
        """
        Train a copy of `model`; the epoch counter drives mask-out.
        Every visit of a sample draws a fresh augmentation and rotation.
        """
        clouds = TrainingService._split(data, "train")
        if len(clouds) < 2:
            raise EmptyDatasetError(f"training needs at least 2 clouds, got {len(clouds)}")
        if any(c.label is None for c in clouds):
            raise InvalidInputError("every training cloud needs a label")
        state = model.copy()
        if cfg.maskout_epochs is not None:
            state.config = state.config.model_copy(update={"maskout_epochs": cfg.maskout_epochs})
        optimizer = TrainingService.make_optimizer(cfg)
        labels = np.array([c.label for c in clouds], dtype=np.int64)
        history = History()
        start_epoch = state.epoch

        for e in range(cfg.epochs):
            state.epoch = start_epoch + e
            lr = TrainingService.learning_rate(cfg, e)
            tic = time.perf_counter()
            shuffle_rng = np.random.default_rng(GeometryService.derive_seed(cfg.seed, state.epoch, _SHUFFLE))
            dropout_rng = np.random.default_rng(GeometryService.derive_seed(cfg.seed, state.epoch, _DROPOUT))
            total_loss, correct = 0.0, 0

            bar = tqdm(TrainingService.batches(len(clouds), cfg.batch_size, shuffle_rng),
                       desc=f"epoch {e + 1}/{cfg.epochs}", leave=False,
                       disable=not TrainingService._show_progress(cfg))
            for idx in bar:
                batch = [TrainingService.augment(clouds[i], cfg, train_rotation,
                                                 GeometryService.derive_seed(cfg.seed, state.epoch, int(i), _AUGMENT))
                         for i in idx]
                with Tape() as tape:
                    logits = NetworkService.forward_batch(batch, state, training=True, rng=dropout_rng)
                    loss = TensorService.cross_entropy(logits, labels[idx], cfg.label_smoothing)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss in epoch {state.epoch}", last_finite_epoch=state.epoch - 1)
                state.zero_grad()
                tape.backward(loss)
                optimizer.step(state.params, lr, SPEService.held_entries(state, state.epoch))
                total_loss += value * len(idx)
                correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
                bar.set_postfix(loss=f"{value:.4f}")

            history.losses.append(total_loss / len(clouds))
            history.accuracies.append(correct / len(clouds))
            history.epoch_times.append(time.perf_counter() - tic)
            if eval_data is not None:
                state.epoch = start_epoch + e + 1
                history.eval_accuracies.append(TrainingService.evaluate(
                    state, eval_data, eval_rotation or train_rotation, eval_seed))
            logger.info("epoch %d/%d loss=%.4f train_acc=%.3f lr=%.4g%s", e + 1, cfg.epochs,
                        history.losses[-1], history.accuracies[-1], lr,
                        f" eval_acc={history.eval_accuracies[-1]:.3f}" if history.eval_accuracies else "")

        logger.info("trained %d epochs in %.1fs", history.epochs, history.wall_time)
        state.epoch = start_epoch + cfg.epochs
        state.zero_grad()
        return state, history

    @staticmethod
    def evaluate(model: ModelState, data: Union[Dataset, Sequence[PointCloud]], test_rotation: Rotation,
                 seed: int = 0, predictor: Optional[Callable[[List[PointCloud]], np.ndarray]] = None,
                 batch_size: int = 32) -> float:
        """
        Top-1 accuracy in eval mode; sample i is rotated with a rotation drawn from (seed, i).
        `predictor` replaces the network (it maps clouds to logits).
        """
        clouds = TrainingService._split(data, "test")
        if not clouds:
            raise EmptyDatasetError("evaluation set is empty")
        rotated = [GeometryService.rotate(c, GeometryService.random_rotation(
            test_rotation, GeometryService.derive_seed(seed, i, _EVAL))) for i, c in enumerate(clouds)]
        if predictor is None:
            logits = NetworkService.predict(rotated, model, batch_size)
        else:
            logits = np.asarray(predictor(rotated))
        labels = np.array([c.label for c in clouds], dtype=np.int64)
        return float((np.argmax(logits, axis=1) == labels).mean())
