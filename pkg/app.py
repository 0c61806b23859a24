import logging
import os
import sys
from functools import wraps

import click
import numpy as np

# Project internal imports
from config import Config, load_config
from models.entities import BRANCH_ORDER, VARIANTS, EncodingKind, PointCloud, Regime, Rotation
from models.errors import GradientCheckError, InvalidInputError, SpeNetError
from models.settings import SHAPE_CLASSES
from repositories.checkpoint_repository import CheckpointRepository
from repositories.cloud_repository import CloudRepository
from services.dataset_service import DatasetService
from services.encoding_service import EncodingService
from services.geometry_service import GeometryService
from services.gradcheck_service import GradCheckService
from services.matrix_service import MatrixService
from services.neighborhood_service import NeighborhoodService
from services.network_service import NetworkService
from services.report_service import ReportService
from services.stats_service import StatsService
from services.training_service import TrainingService

logger = logging.getLogger(__name__)

REGIME_NAMES = ["nn", "zz", "zso3", "so3so3"]


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def reports_errors(fn):
    """Turn library errors into one machine-readable stderr line and exit code 1."""
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SpeNetError as e:
            click.echo(f"error code={e.code} message={_one_line(e.message)}", err=True)
            sys.exit(1)
        except OSError as e:
            click.echo(f"error code=io message={_one_line(e)}", err=True)
            sys.exit(1)
        except Exception as e:
            logger.debug("unexpected failure in %s", fn.__name__, exc_info=True)
            click.echo(f"error code=internal message={_one_line(f'{type(e).__name__}: {e}')}", err=True)
            sys.exit(1)
    return wrapper


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key=value config file")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), help="init / training seed")(fn)
    fn = click.option("--regime", type=click.Choice(REGIME_NAMES), help="train/test rotation regime")(fn)
    fn = click.option("--variant", type=click.Choice(VARIANTS), help="model variant")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(file_okay=False), help="output directory")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="extra config override, e.g. --set train.epochs=5")(fn)
    return fn


def _settings(config_path, seed, regime, variant, overrides):
    values = {}
    for item in overrides:
        if "=" not in item:
            raise InvalidInputError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value
    if seed is not None:
        values["train.seed"] = str(seed)
        values["harness.seeds"] = str(seed)
    if regime is not None:
        values["harness.regimes"] = regime
    if variant is not None:
        values["net.variant"] = variant
        values["harness.variants"] = variant
    return load_config(config_path, values)


def _out(out_dir) -> str:
    path = out_dir or Config.OUTPUT_DIR
    os.makedirs(path, exist_ok=True)
    return path


def _input_cloud(input_path, shape, points, seed) -> PointCloud:
    if input_path:
        cloud = CloudRepository.load_any(input_path, None, points, seed)
        if points:
            cloud = DatasetService.fit_points(cloud, points, seed)
    else:
        positions = DatasetService.sample_shape(shape, points, seed)
        cloud = PointCloud(positions, id=f"{shape}_{seed}")
    return GeometryService.normalize_cloud(cloud)[0]


def _cloud_options(fn):
    fn = click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False),
                      help="point text file or OFF mesh")(fn)
    fn = click.option("--shape", type=click.Choice(SHAPE_CLASSES), default="sphere", show_default=True,
                      help="synthetic primitive used when --input is absent")(fn)
    fn = click.option("--points", type=click.IntRange(1), help="points per cloud")(fn)
    return fn


def create_cli():
    @click.group()
    @click.option("--log-level", default=None, help="overrides SPE_LOG_LEVEL")
    def cli(log_level):
        """Selective position encoding for rotation-robust point cloud classification."""
        logging.basicConfig(level=(log_level or Config.LOG_LEVEL).upper(),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    # --- TRAINING ---
    @cli.command()
    @common_options
    @click.option("--eval-each-epoch", is_flag=True, help="record test accuracy after every epoch")
    @reports_errors
    def train(config_path, seed, regime, variant, out_dir, overrides, eval_each_epoch):
        """Train one model and save model.ckpt plus history.csv."""
        app = _settings(config_path, seed, regime, variant, overrides)
        out = _out(out_dir)
        chosen = Regime.from_name(regime or "nn")
        dataset = DatasetService.load_dataset(app.data)
        net = app.net.model_copy(update={"num_classes": dataset.num_classes})
        state = NetworkService.init_parameters(net, app.train.seed)
        state.extra["regime"] = chosen.name
        eval_data = dataset if (eval_each_epoch and dataset.test) else None
        state, history = TrainingService.train(state, dataset, app.train, chosen.train_rotation,
                                               eval_data=eval_data, eval_rotation=chosen.test_rotation,
                                               eval_seed=app.harness.eval_seed)
        CheckpointRepository.save_checkpoint(state, os.path.join(out, "model.ckpt"))
        ReportService.write(os.path.join(out, "history.csv"), ReportService.history_csv(history))
        summary = f"epochs={history.epochs} final_loss={history.losses[-1]:.6f}"
        if dataset.test:
            acc = TrainingService.evaluate(state, dataset, chosen.test_rotation, app.harness.eval_seed)
            summary += f" regime={chosen.name} accuracy={acc:.4f}"
        click.echo(summary)

    @cli.command(name="eval")
    @common_options
    @click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
    @reports_errors
    def evaluate(config_path, seed, regime, variant, out_dir, overrides, checkpoint):
        """Accuracy of a saved model on the test split under the regime's test rotation."""
        app = _settings(config_path, seed, regime, variant, overrides)
        state = CheckpointRepository.load_checkpoint(checkpoint)
        chosen = Regime.from_name(regime or state.extra.get("regime", "nn"))
        dataset = DatasetService.load_dataset(app.data)
        acc = TrainingService.evaluate(state, dataset, chosen.test_rotation, app.harness.eval_seed)
        chance = StatsService.chance_level(dataset.num_classes)
        click.echo(f"regime={chosen.name} accuracy={acc:.4f} chance={chance:.4f}")

    # --- HARNESS ---
    @cli.command()
    @common_options
    @click.option("--workers", type=click.IntRange(1), help="parallel training processes")
    @reports_errors
    def matrix(config_path, seed, regime, variant, out_dir, overrides, workers):
        """Train / evaluate every (variant, regime) cell; writes regime_matrix.csv and loss curves."""
        app = _settings(config_path, seed, regime, variant, overrides)
        out = _out(out_dir)
        result = MatrixService.run_regime_matrix(app, workers=workers)
        ReportService.write(os.path.join(out, "regime_matrix.csv"),
                            ReportService.regime_matrix_csv(result, app.harness.variants, app.harness.regimes))
        ReportService.write(os.path.join(out, "regime_cells.csv"),
                            ReportService.regime_cells_csv(result, app.harness.variants, app.harness.regimes))
        checks = StatsService.regime_pattern(result, result.num_classes)
        ReportService.write(os.path.join(out, "regime_pattern.csv"), ReportService.pattern_csv(checks))
        for rotation in (Rotation.NONE, Rotation.Z, Rotation.SO3):
            histories = MatrixService.loss_histories(result, rotation)
            if histories:
                ReportService.write(os.path.join(out, f"loss_curves_{rotation.value}.csv"),
                                    ReportService.loss_curves_csv(histories))
        failed = [f"{v}/{r}" for (v, r), cell in sorted(result.cells.items()) if cell.failed]
        click.echo(f"cells={len(result.cells)} failed={len(failed)}" + (f" ({', '.join(failed)})" if failed else ""))
        checked = [ok for ok in checks.values() if ok is not None]
        click.echo(f"pattern passed={sum(checked)} checked={len(checked)}")

    @cli.command()
    @common_options
    @click.option("--values", help="comma separated mask-out epochs (default harness.maskout_sweep)")
    @reports_errors
    def sweep(config_path, seed, regime, variant, out_dir, overrides, values):
        """Mask-out trade-off: train sel under Z for each T, report Z/Z and Z/SO3 accuracy."""
        app = _settings(config_path, seed, regime, variant, overrides)
        out = _out(out_dir)
        try:
            ts = [int(v) for v in values.split(",")] if values else list(app.harness.maskout_sweep)
        except ValueError as e:
            raise InvalidInputError(f"--values must be integers: {values!r}") from e
        results = MatrixService.sweep_maskout(app, ts)
        ReportService.write(os.path.join(out, "maskout_sweep.csv"), ReportService.sweep_csv(results))
        click.echo(f"rows={len(results)}")

    # --- EXPORTS ---
    @cli.command()
    @common_options
    @_cloud_options
    @click.option("--kind", type=click.Choice([k.value for k in BRANCH_ORDER] + ["all"]), default="all",
                  show_default=True)
    @click.option("--radius", type=float, default=0.2, show_default=True)
    @click.option("--k", "k", type=click.IntRange(1), default=16, show_default=True)
    @reports_errors
    def encode(config_path, seed, regime, variant, out_dir, overrides, input_path, shape, points, kind, radius, k):
        """Position encodings of every (point, neighbor) pair of one cloud as encodings.csv."""
        out = _out(out_dir)
        cloud = _input_cloud(input_path, shape, points or 512, seed or 0)
        index = NeighborhoodService.ball_query(cloud, np.arange(cloud.size), radius, k)
        kinds = list(BRANCH_ORDER) if kind == "all" else [EncodingKind(kind)]
        encodings = EncodingService.encode_positions(cloud.positions, index.query_indices, index.neighbor_lists,
                                                     radius, kinds)
        ReportService.write(os.path.join(out, "encodings.csv"),
                            ReportService.encoding_csv(index.query_indices, index.neighbor_lists, encodings))
        click.echo(f"rows={cloud.size * k}")

    @cli.command()
    @common_options
    @_cloud_options
    @click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
    @click.option("--stage", type=int, default=0, show_default=True, help="index of the strided block")
    @reports_errors
    def attention(config_path, seed, regime, variant, out_dir, overrides, input_path, shape, points,
                  checkpoint, stage):
        """Per-point dominant encoding in a strided block, as attention.csv."""
        out = _out(out_dir)
        state = CheckpointRepository.load_checkpoint(checkpoint)
        cloud = _input_cloud(input_path, shape, points or state.config.input_points, seed or 0)
        cloud = DatasetService.fit_points(cloud, state.config.input_points, seed or 0)
        export = MatrixService.export_attention(state, cloud, stage)
        ReportService.write(os.path.join(out, "attention.csv"),
                            ReportService.attention_csv(export.positions, export.labels, export.branch_means))
        counts = StatsService.label_distribution(export.labels, ("CD", "ZRI", "ARI"))
        click.echo(" ".join(f"{name}={n}" for name, n in counts.items()))

    @cli.command()
    @common_options
    @click.option("--trials", type=click.IntRange(1), default=10, show_default=True)
    @reports_errors
    def gradcheck(config_path, seed, regime, variant, out_dir, overrides, trials):
        """Central-difference check of every differentiable operation (float64)."""
        results = GradCheckService.run_suite(seed or 0, trials)
        for r in results:
            click.echo(f"{r['op']},{r['max_rel_error']:.3e},{'ok' if r['passed'] else 'FAIL'}")
        failed = [r["op"] for r in results if not r["passed"]]
        if failed:
            raise GradientCheckError(f"gradient check failed for {', '.join(failed)}")

    @cli.command()
    @common_options
    @reports_errors
    def dataset(config_path, seed, regime, variant, out_dir, overrides):
        """Generate the synthetic dataset and write clouds, manifests and classes.txt."""
        app = _settings(config_path, seed, regime, variant, overrides)
        out = _out(out_dir)
        data = DatasetService.generate_synthetic_dataset(
            app.data.classes, app.data.per_class, app.data.points, app.data.seed, app.data.jitter,
            (app.data.scale_low, app.data.scale_high))
        CloudRepository.save_dataset(data, out)
        click.echo(f"train={len(data.train)} test={len(data.test)} classes={data.num_classes}")

    return cli


cli = create_cli()

if __name__ == '__main__':
    cli()
