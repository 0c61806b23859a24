import math

import numpy as np
import pytest
from conftest import make_cloud

from models.entities import PointCloud, Rotation
from models.errors import ConfigError, EmptyDatasetError, TrainingDivergedError
from models.settings import TrainConfig, build_settings
from models.tensor import Parameter
from services.network_service import NetworkService
from services.spe_service import SPEService
from services.training_service import SGD, AdamW, TrainingService


@pytest.fixture
def model(tiny_config):
    return NetworkService.init_parameters(tiny_config.model_copy(update={"num_classes": 2}), 0)


def _cfg(**overrides):
    values = dict(epochs=1, batch_size=4, lr=0.01, progress=False)
    values.update(overrides)
    return TrainConfig(**values)


def test_one_epoch_on_ten_samples(model):
    clouds = [make_cloud(s, label=s % 2) for s in range(10)]
    state, history = TrainingService.train(model, clouds, _cfg())
    assert history.epochs == 1
    assert len(history.accuracies) == 1 and len(history.epoch_times) == 1
    assert math.isfinite(history.losses[0])
    assert state.epoch == 1


def test_zero_learning_rate_leaves_parameters_unchanged(model, tiny_dataset):
    state, _ = TrainingService.train(model, tiny_dataset, _cfg(lr=0.0, epochs=2))
    for name, p in model.params.items():
        np.testing.assert_array_equal(state.params[name].data, p.data)


def test_training_works_on_a_copy(model, tiny_dataset):
    before = {n: p.data.copy() for n, p in model.params.items()}
    state, _ = TrainingService.train(model, tiny_dataset, _cfg(lr=0.1))
    for name, values in before.items():
        np.testing.assert_array_equal(model.params[name].data, values)
    assert any(not np.array_equal(state.params[n].data, v) for n, v in before.items())
    assert model.epoch == 0


def test_masked_branches_are_not_updated(model, tiny_dataset):
    state, _ = TrainingService.train(model, tiny_dataset, _cfg(lr=0.1, maskout_epochs=100))
    masked = "stage0.block0.spe.branch0.layer0.fc.weight"
    active = "stage0.block0.spe.branch2.layer0.fc.weight"
    np.testing.assert_array_equal(state.params[masked].data, model.params[masked].data)
    assert not np.array_equal(state.params[active].data, model.params[active].data)
    assert state.config.maskout_epochs == 100


@pytest.mark.parametrize("optimizer", ["sgd", "adamw"])
def test_mask_window_holds_the_masked_selection_rows(model, tiny_dataset, optimizer):
    state, _ = TrainingService.train(model, tiny_dataset, _cfg(lr=0.1, maskout_epochs=100, optimizer=optimizer,
                                                               weight_decay=0.1))
    for suffix in ("weight", "bias"):
        name = f"stage0.block0.spe.select.{suffix}"
        before, after = model.params[name].data, state.params[name].data
        np.testing.assert_array_equal(after[:4], before[:4])
        assert not np.array_equal(after[4:], before[4:])


def test_held_entries_follow_the_window(model):
    cfg = model.config.model_copy(update={"maskout_epochs": 2})
    state = NetworkService.init_parameters(cfg, 0)
    held = SPEService.held_entries(state, epoch=1)
    assert set(held) == {n for n in state.params if ".select." in n}
    assert held["stage0.block0.spe.select.weight"][:4].all() and not held["stage0.block0.spe.select.weight"][4:].any()
    assert SPEService.held_entries(state, epoch=2) == {}
    fused = NetworkService.init_parameters(cfg.model_copy(update={"variant": "fused"}), 0)
    assert SPEService.held_entries(fused, epoch=0) == {}


def test_sgd_skips_held_entries():
    p = Parameter(np.ones(3), "w")
    p.grad = np.ones(3)
    SGD(momentum=0.9, weight_decay=0.1).step({"w": p}, lr=0.5, held={"w": np.array([True, False, False])})
    assert p.data[0] == 1.0 and p.data[1] < 1.0


def test_adamw_updates_parameters(model, tiny_dataset):
    state, history = TrainingService.train(model, tiny_dataset, _cfg(optimizer="adamw", lr=0.001))
    assert isinstance(TrainingService.make_optimizer(_cfg(optimizer="adamw")), AdamW)
    assert not np.array_equal(state.params["head.out.weight"].data, model.params["head.out.weight"].data)


def test_eval_each_epoch_records_accuracy(model, tiny_dataset):
    _, history = TrainingService.train(model, tiny_dataset, _cfg(epochs=2), eval_data=tiny_dataset,
                                       eval_rotation=Rotation.SO3)
    assert len(history.eval_accuracies) == 2
    assert all(0.0 <= a <= 1.0 for a in history.eval_accuracies)


def test_non_finite_loss_aborts(model, tiny_dataset):
    model.params["head.out.weight"].data[...] = np.nan
    with pytest.raises(TrainingDivergedError) as excinfo:
        TrainingService.train(model, tiny_dataset, _cfg())
    assert excinfo.value.last_finite_epoch == -1


def test_training_needs_two_clouds(model):
    with pytest.raises(EmptyDatasetError):
        TrainingService.train(model, [make_cloud(0, label=0)], _cfg())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        build_settings(TrainConfig, {"epochs": 0})
    with pytest.raises(ConfigError):
        build_settings(TrainConfig, {"label_smoothing": 1.0})


def test_batches_merge_a_trailing_singleton(rng):
    chunks = TrainingService.batches(9, 4, rng)
    assert [len(c) for c in chunks] == [4, 5]
    assert sorted(np.concatenate(chunks).tolist()) == list(range(9))


def test_cosine_schedule():
    cfg = _cfg(lr=0.1, epochs=10)
    assert TrainingService.learning_rate(cfg, 0) == pytest.approx(0.1)
    assert TrainingService.learning_rate(cfg, 5) == pytest.approx(0.05)
    assert TrainingService.learning_rate(_cfg(lr=0.1, schedule="constant"), 7) == 0.1


def test_augment_without_toggles_is_identity(cloud):
    cfg = _cfg(augment_scale=False, noise_sigma=0.0)
    out = TrainingService.augment(cloud, cfg, Rotation.NONE, seed=3)
    np.testing.assert_array_equal(out.positions, cloud.positions)


def test_z_augmentation_keeps_heights(cloud):
    cfg = _cfg(augment_scale=False, noise_sigma=0.0)
    out = TrainingService.augment(cloud, cfg, Rotation.Z, seed=3)
    np.testing.assert_allclose(out.positions[:, 2], cloud.positions[:, 2], atol=1e-15)
    assert not np.allclose(out.positions, cloud.positions)


def test_perfect_predictor_scores_one(tiny_dataset):
    predictor = lambda clouds: np.eye(2)[[c.label for c in clouds]]
    assert TrainingService.evaluate(None, tiny_dataset, Rotation.SO3, predictor=predictor) == 1.0


def test_random_predictor_scores_chance():
    rng = np.random.default_rng(0)
    clouds = [PointCloud(np.zeros((1, 3)), label=int(rng.integers(4))) for _ in range(2000)]
    predictor = lambda batch: rng.normal(size=(len(batch), 4))
    accuracy = TrainingService.evaluate(None, clouds, Rotation.NONE, predictor=predictor)
    assert accuracy == pytest.approx(0.25, abs=0.05)


def test_evaluate_on_an_empty_set_raises():
    with pytest.raises(EmptyDatasetError):
        TrainingService.evaluate(None, [], Rotation.NONE)


def test_evaluate_uses_the_network(model, tiny_dataset):
    accuracy = TrainingService.evaluate(model, tiny_dataset, Rotation.Z, seed=1)
    assert 0.0 <= accuracy <= 1.0
    assert accuracy == TrainingService.evaluate(model, tiny_dataset, Rotation.Z, seed=1)


def test_epoch_one_loss_is_reproducible(model, tiny_dataset):
    cfg = _cfg(seed=3)
    _, first = TrainingService.train(model, tiny_dataset, cfg, Rotation.SO3)
    _, second = TrainingService.train(model, tiny_dataset, cfg, Rotation.SO3)
    assert first.losses[0] == second.losses[0]


def test_loss_decreases_monotonically_on_a_separable_toy_set(tiny_config):
    # full batch, no dropout and no augmentation: plain gradient descent on a fixed objective
    net = tiny_config.model_copy(update={"num_classes": 2, "dropout": 0.0})
    model = NetworkService.init_parameters(net, 0)
    data = [make_cloud(s, label=0) for s in range(8)]
    data += [PointCloud(make_cloud(s).positions * [1.0, 1.0, 0.05], label=1) for s in range(8, 16)]
    cfg = _cfg(epochs=5, lr=0.01, batch_size=16, schedule="constant", momentum=0.0, weight_decay=0.0,
               augment_scale=False, noise_sigma=0.0)
    _, history = TrainingService.train(model, data, cfg)
    assert all(b < a for a, b in zip(history.losses, history.losses[1:]))
