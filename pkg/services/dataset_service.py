import logging
import math
import os
from typing import Callable, Dict, List, Sequence

import numpy as np

from models.entities import Dataset, PointCloud
from models.errors import EmptyDatasetError, InvalidInputError, UnknownShapeClassError
from models.settings import SHAPE_CLASSES, DatasetConfig, build_settings
from repositories.cloud_repository import CloudRepository
from services.geometry_service import GeometryService

logger = logging.getLogger(__name__)

TEST_FRACTION_DIVISOR = 5  # 80 / 20 split


def _unit_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(norms, 1e-12)


def _split_by_area(rng: np.random.Generator, n: int, areas: Sequence[float]) -> np.ndarray:
    """Which surface part each of the n samples lands on."""
    p = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(p), size=n, p=p / p.sum())


def _disk(rng, n, radius, z):
    r = radius * np.sqrt(rng.random(n))
    t = rng.uniform(0.0, 2.0 * math.pi, n)
    return np.stack([r * np.cos(t), r * np.sin(t), np.full(n, z)], axis=1)


# --- Surface samplers (canonical pose, roughly unit size) ---
def _sphere(rng, n):
    return _unit_directions(rng, n)


def _cube(rng, n):
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64) * 0.6
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    triangles = np.array([t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))])
    return CloudRepository.sample_mesh(corners, triangles, n, int(rng.integers(2 ** 32)))


def _pyramid(rng, n):
    vertices = np.array([[-0.7, -0.7, -0.5], [0.7, -0.7, -0.5], [0.7, 0.7, -0.5], [-0.7, 0.7, -0.5],
                         [0.0, 0.0, 0.9]])
    triangles = np.array([[0, 1, 2], [0, 2, 3], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    return CloudRepository.sample_mesh(vertices, triangles, n, int(rng.integers(2 ** 32)))


def _cylinder(rng, n, radius=0.5, height=1.6):
    part = _split_by_area(rng, n, [2 * math.pi * radius * height, math.pi * radius ** 2, math.pi * radius ** 2])
    t = rng.uniform(0.0, 2.0 * math.pi, n)
    out = np.stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(-height / 2, height / 2, n)], axis=1)
    for cap, z in ((1, height / 2), (2, -height / 2)):
        idx = part == cap
        out[idx] = _disk(rng, int(idx.sum()), radius, z)
    return out


def _cone(rng, n, radius=0.7, height=1.4):
    slant = math.hypot(radius, height)
    part = _split_by_area(rng, n, [math.pi * radius * slant, math.pi * radius ** 2])
    # lateral: distance from apex has density proportional to itself
    s = np.sqrt(rng.random(n))
    t = rng.uniform(0.0, 2.0 * math.pi, n)
    out = np.stack([s * radius * np.cos(t), s * radius * np.sin(t), height / 2 - s * height], axis=1)
    base = part == 1
    out[base] = _disk(rng, int(base.sum()), radius, -height / 2)
    return out


def _torus(rng, n, major=0.7, minor=0.25):
    out = np.empty((0, 3))
    while out.shape[0] < n:
        u = rng.uniform(0.0, 2.0 * math.pi, 2 * n)
        v = rng.uniform(0.0, 2.0 * math.pi, 2 * n)
        keep = rng.random(2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)])
    return out[:n]


def _capsule(rng, n, radius=0.4, height=1.0):
    part = _split_by_area(rng, n, [2 * math.pi * radius * height, 4 * math.pi * radius ** 2])
    t = rng.uniform(0.0, 2.0 * math.pi, n)
    out = np.stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(-height / 2, height / 2, n)], axis=1)
    caps = part == 1
    d = _unit_directions(rng, int(caps.sum())) * radius
    d[:, 2] += np.where(d[:, 2] >= 0, height / 2, -height / 2)
    out[caps] = d
    return out


def _ellipsoid(rng, n, axes=(1.0, 0.65, 0.4)):
    # scaled sphere directions; not exactly area-uniform
    return _unit_directions(rng, n) * np.asarray(axes)


SAMPLERS: Dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "pyramid": _pyramid,
    "capsule": _capsule,
    "ellipsoid": _ellipsoid,
}


class DatasetService:
    @staticmethod
    def sample_shape(name: str, points: int, seed: int) -> np.ndarray:
        """
        Raw surface samples of one primitive, before scaling, jitter and normalization
        """
        if name not in SAMPLERS:
            raise UnknownShapeClassError(f"unknown shape class {name!r}; expected one of {list(SHAPE_CLASSES)}")
        if points < 1:
            raise InvalidInputError("points must be >= 1")
        return SAMPLERS[name](np.random.default_rng(seed), points)

    @staticmethod
    def make_sample(name: str, label: int, index: int, cfg: DatasetConfig) -> PointCloud:
        seed = GeometryService.derive_seed(cfg.seed, label, index)
        rng = np.random.default_rng(seed)
        positions = DatasetService.sample_shape(name, cfg.points, GeometryService.derive_seed(seed, 1))
        positions = positions * rng.uniform(cfg.scale_low, cfg.scale_high, size=3)
        positions = positions + rng.normal(0.0, cfg.jitter, size=positions.shape)
        cloud, _ = GeometryService.normalize_cloud(PointCloud(positions, label=label, id=f"{name}_{index:04d}"))
        return cloud

    @staticmethod
    def generate_synthetic_dataset(classes: Sequence[str], per_class: int, points: int, seed: int,
                                   jitter: float = 0.01, scale_range=(0.8, 1.2)) -> Dataset:
        """
        Surface-sampled primitives, split 80/20 per class (the last fifth of each class is test)
        """
        unknown = [c for c in classes if c not in SAMPLERS]
        if unknown:
            raise UnknownShapeClassError(f"unknown shape classes {unknown}; expected from {list(SHAPE_CLASSES)}")
        if not classes:
            raise InvalidInputError("at least one class is required")
        if per_class < 1:
            raise InvalidInputError("per_class must be >= 1")
        cfg = build_settings(DatasetConfig, dict(classes=list(classes), per_class=per_class, points=points,
                                                 seed=seed, jitter=jitter, scale_low=scale_range[0],
                                                 scale_high=scale_range[1]))
        n_test = per_class // TEST_FRACTION_DIVISOR
        train, test = [], []
        for label, name in enumerate(classes):
            samples = [DatasetService.make_sample(name, label, i, cfg) for i in range(per_class)]
            train += samples[:per_class - n_test]
            test += samples[per_class - n_test:]
        logger.info("Generated %d train / %d test clouds over %d classes", len(train), len(test), len(classes))
        return Dataset(train=train, test=test, class_names=list(classes))

    @staticmethod
    def fit_points(cloud: PointCloud, points: int, seed: int) -> PointCloud:
        """Subsample (or resample with replacement) to exactly `points` points."""
        if cloud.size == points:
            return cloud
        rng = np.random.default_rng(seed)
        idx = rng.choice(cloud.size, size=points, replace=cloud.size < points)
        return cloud.with_positions(cloud.positions[np.sort(idx)])

    @staticmethod
    def load_dataset(cfg: DatasetConfig) -> Dataset:
        """
        Synthetic data, or the clouds listed in `cfg.manifest` / `cfg.test_manifest`
        """
        if not cfg.manifest:
            return DatasetService.generate_synthetic_dataset(
                cfg.classes, cfg.per_class, cfg.points, cfg.seed, cfg.jitter, (cfg.scale_low, cfg.scale_high))
        folder = os.path.dirname(os.path.abspath(cfg.manifest))
        test_manifest = cfg.test_manifest or os.path.join(folder, "manifest_test.txt")
        classes_file = os.path.join(folder, "classes.txt")
        class_names = CloudRepository.read_classes(classes_file) if os.path.exists(classes_file) else list(cfg.classes)

        def prepare(clouds: List[PointCloud], offset: int) -> List[PointCloud]:
            out = []
            for i, cloud in enumerate(clouds):
                cloud = DatasetService.fit_points(cloud, cfg.points, GeometryService.derive_seed(cfg.seed, offset, i))
                out.append(GeometryService.normalize_cloud(cloud)[0])
            return out

        train = prepare(CloudRepository.load_split(cfg.manifest, cfg.points, cfg.seed), 0)
        test = (prepare(CloudRepository.load_split(test_manifest, cfg.points, cfg.seed + 1), 1)
                if os.path.exists(test_manifest) else [])
        if not train:
            raise EmptyDatasetError(f"manifest {cfg.manifest} lists no clouds")
        bad = [c.id for c in train + test if not 0 <= c.label < len(class_names)]
        if bad:
            raise InvalidInputError(f"labels outside 0..{len(class_names) - 1} for {bad[:5]}")
        logger.info("Loaded %d train / %d test clouds from %s", len(train), len(test), cfg.manifest)
        return Dataset(train=train, test=test, class_names=class_names)
