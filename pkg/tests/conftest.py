import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from models.entities import PointCloud
from models.settings import NetworkConfig
from services.dataset_service import DatasetService
from services.geometry_service import GeometryService

settings.register_profile("fast", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fast")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Two stages, 32 input points; stage 1 is the first strided block."""
    return NetworkConfig(stage_channels=[6, 12], input_points=32, k=4, base_radius=0.3,
                         num_classes=3, variant="sel")


def make_cloud(seed: int, points: int = 32, label=None) -> PointCloud:
    positions = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(points, 3))
    cloud, _ = GeometryService.normalize_cloud(PointCloud(positions, label=label, id=f"rand_{seed}"))
    return cloud


@pytest.fixture
def cloud():
    return make_cloud(7)


@pytest.fixture
def tiny_dataset():
    return DatasetService.generate_synthetic_dataset(["sphere", "cube"], per_class=5, points=32, seed=0)
