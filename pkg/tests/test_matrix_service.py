import numpy as np
import pytest

from models.entities import REGIMES, VARIANTS, Regime, Rotation
from models.errors import InvalidInputError, StageOutOfRangeError, TrainingDivergedError
from models.settings import AppConfig, DatasetConfig, HarnessConfig, TrainConfig
from services.matrix_service import MatrixService, variant_config
from services.network_service import NetworkService
from services.report_service import ReportService
from services.training_service import TrainingService


@pytest.fixture
def app(tiny_config):
    return AppConfig(
        net=tiny_config,
        train=TrainConfig(epochs=1, batch_size=4, lr=0.01, progress=False),
        data=DatasetConfig(classes=["sphere", "cube"], per_class=5, points=32),
        harness=HarnessConfig(variants=["cd", "sel"], regimes=["nn", "zz"], seeds=[0], sel_maskout_epochs=1),
    )


def test_jobs_share_training_between_regimes():
    jobs = MatrixService.plan_jobs(["cd", "sel"], list(REGIMES), [0, 1])
    assert len(jobs) == 2 * 3 * 2
    z_jobs = [j for j in jobs if j.variant == "cd" and j.train_rotation == Rotation.Z and j.seed == 0]
    assert len(z_jobs) == 1
    assert z_jobs[0].test_rotations == (Rotation.Z, Rotation.SO3)


def test_only_sel_gets_a_mask_window(app):
    assert variant_config(app, "sel", 2).maskout_epochs == 1
    assert variant_config(app, "cd", 2).maskout_epochs == 0
    assert variant_config(app, "fused", 4).num_classes == 4
    assert variant_config(app, "sel", 2, maskout_epochs=7).maskout_epochs == 7


def test_small_regime_matrix(app, tiny_dataset):
    matrix = MatrixService.run_regime_matrix(app, dataset=tiny_dataset)
    assert set(matrix.cells) == {("cd", "nn"), ("cd", "zz"), ("sel", "nn"), ("sel", "zz")}
    for cell in matrix.cells.values():
        assert not cell.failed
        assert len(cell.accuracies) == 1
        assert 0.0 <= cell.mean_accuracy <= 1.0
    assert set(matrix.parameter_counts) == {"cd", "sel"}
    assert ("sel", "z", 0) in matrix.histories
    assert set(MatrixService.loss_histories(matrix, Rotation.NONE)) == {"cd", "sel"}


def test_failed_training_marks_its_cells(app, tiny_dataset, monkeypatch):
    original = TrainingService.train

    def flaky(model, *args, **kwargs):
        if model.config.variant == "cd":
            raise TrainingDivergedError("non-finite loss", last_finite_epoch=-1)
        return original(model, *args, **kwargs)

    monkeypatch.setattr(TrainingService, "train", flaky)
    matrix = MatrixService.run_regime_matrix(app, dataset=tiny_dataset, regimes=["nn"])
    assert matrix.cell("cd", "nn").failed
    assert "training_diverged" in matrix.cell("cd", "nn").error
    assert not matrix.cell("sel", "nn").failed
    text = ReportService.regime_matrix_csv(matrix, ["cd", "sel"], ["nn"])
    assert "cd,{},failed".format(matrix.parameter_counts["cd"]) in text


def test_unknown_variant_is_rejected(app, tiny_dataset):
    with pytest.raises(InvalidInputError):
        MatrixService.run_regime_matrix(app, dataset=tiny_dataset, variants=["pointnet"])


def test_maskout_sweep(app, tiny_dataset):
    results = MatrixService.sweep_maskout(app, [0, 1], dataset=tiny_dataset)
    assert sorted(results) == [0, 1]
    for row in results.values():
        assert set(row) == {"zz", "zso3"}
    with pytest.raises(InvalidInputError):
        MatrixService.sweep_maskout(app, [-1], dataset=tiny_dataset)


def test_attention_inside_the_mask_window_is_all_ari(tiny_config, cloud):
    state = NetworkService.init_parameters(tiny_config.model_copy(update={"maskout_epochs": 5}), 0)
    export = MatrixService.export_attention(state, cloud, stage=0)
    assert export.block == "stage1.block0.spe"
    assert export.positions.shape == (16, 3)
    assert export.branch_means.shape == (16, 3)
    assert set(export.labels) == {"ARI"}


def test_attention_after_the_window_uses_all_branches(tiny_config, cloud):
    state = NetworkService.init_parameters(tiny_config, 0)
    export = MatrixService.export_attention(state, cloud)
    assert np.all(export.branch_means > 0.0)
    assert set(export.labels) <= {"CD", "ZRI", "ARI"}


def test_attention_stage_out_of_range(tiny_config, cloud):
    with pytest.raises(StageOutOfRangeError):
        MatrixService.export_attention(NetworkService.init_parameters(tiny_config, 0), cloud, stage=3)


def test_single_type_models_have_no_attention(tiny_config, cloud):
    state = NetworkService.init_parameters(tiny_config.model_copy(update={"variant": "ari"}), 0)
    with pytest.raises(InvalidInputError):
        MatrixService.export_attention(state, cloud)


def test_attention_labels_pick_the_largest_branch():
    means = np.array([[0.9, 0.1, 0.1], [0.1, 0.5, 0.2], [0.2, 0.2, 0.3]])
    assert MatrixService.attention_labels(means) == ["CD", "ZRI", "ARI"]


@pytest.mark.slow
def test_full_matrix_over_every_variant_and_regime(app, tiny_dataset):
    full = app.model_copy(update={"harness": HarnessConfig(seeds=[0, 1], sel_maskout_epochs=1)})
    matrix = MatrixService.run_regime_matrix(full, dataset=tiny_dataset, workers=2)
    assert len(matrix.cells) == len(VARIANTS) * len(REGIMES)
    assert all(not c.failed and len(c.accuracies) == 2 for c in matrix.cells.values())
    assert Regime.from_name("zso3").test_rotation == Rotation.SO3
