import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from models.entities import PointCloud, Rotation, RotationMatrix
from models.errors import InvalidInputError, ShapeMismatchError
from services.geometry_service import GeometryService

seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)


@given(seeds)
def test_random_so3_is_proper(seed):
    assert GeometryService.random_rotation_so3(seed).is_proper()


@given(seeds)
def test_random_z_rotation_fixes_z_axis(seed):
    r = GeometryService.random_rotation_z(seed)
    assert r.is_proper()
    np.testing.assert_allclose(r.entries @ np.array([0.0, 0.0, 1.0]), [0.0, 0.0, 1.0], atol=1e-15)


def test_none_rotation_is_identity():
    np.testing.assert_array_equal(GeometryService.random_rotation(Rotation.NONE, 5).entries, np.eye(3))


def test_random_rotation_is_deterministic():
    a = GeometryService.random_rotation(Rotation.SO3, 42).entries
    b = GeometryService.random_rotation(Rotation.SO3, 42).entries
    np.testing.assert_array_equal(a, b)


def test_rotation_z_quarter_turn():
    r = GeometryService.rotation_z(math.pi / 2)
    np.testing.assert_allclose(r.entries @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)


@given(seeds)
def test_rotate_preserves_norms_and_pairwise_distances(seed):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.uniform(-1, 1, size=(20, 3)))
    rotated = GeometryService.rotate(cloud, GeometryService.random_rotation_so3(seed))
    np.testing.assert_allclose(np.linalg.norm(rotated.positions, axis=1),
                               np.linalg.norm(cloud.positions, axis=1), atol=1e-12)
    d0 = np.linalg.norm(cloud.positions[:, None] - cloud.positions[None], axis=2)
    d1 = np.linalg.norm(rotated.positions[:, None] - rotated.positions[None], axis=2)
    np.testing.assert_allclose(d0, d1, atol=1e-12)


@given(seeds)
def test_transpose_undoes_rotation(seed):
    rotation = GeometryService.random_rotation_so3(seed)
    cloud = PointCloud(np.random.default_rng(seed).uniform(-1, 1, size=(10, 3)))
    back = GeometryService.rotate(GeometryService.rotate(cloud, rotation), rotation.transpose())
    np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-12)
    assert (rotation @ rotation.transpose()).is_proper()


def test_rotation_matrix_rejects_bad_shape():
    with pytest.raises(ShapeMismatchError):
        RotationMatrix(np.eye(2))


def test_reflection_is_not_proper():
    assert not RotationMatrix(np.diag([1.0, 1.0, -1.0])).is_proper()


@given(seeds)
def test_normalize_cloud_centers_and_scales(seed):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.normal(3.0, 2.0, size=(50, 3)))
    out, degenerate = GeometryService.normalize_cloud(cloud)
    assert not degenerate
    np.testing.assert_allclose(out.positions.mean(axis=0), 0.0, atol=1e-12)
    assert np.linalg.norm(out.positions, axis=1).max() == pytest.approx(1.0, abs=1e-12)


def test_normalize_degenerate_cloud_is_flagged():
    out, degenerate = GeometryService.normalize_cloud(PointCloud(np.ones((4, 3))))
    assert degenerate
    np.testing.assert_array_equal(out.positions, np.zeros((4, 3)))


def test_point_cloud_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        PointCloud(np.array([[0.0, np.nan, 1.0]]))


def test_point_cloud_rejects_empty():
    with pytest.raises(InvalidInputError):
        PointCloud(np.zeros((0, 3)))


def test_derive_seed_depends_on_every_part():
    base = GeometryService.derive_seed(1, 2, 3)
    assert base == GeometryService.derive_seed(1, 2, 3)
    assert base != GeometryService.derive_seed(1, 2, 4)
    assert base != GeometryService.derive_seed(2, 2, 3)
    assert 0 <= base < 2 ** 64


@given(seeds, seeds)
def test_rotate_composes(seed1, seed2):
    r1 = GeometryService.random_rotation_so3(seed1)
    r2 = GeometryService.random_rotation_so3(seed2)
    cloud = PointCloud(np.random.default_rng(seed1).uniform(-1, 1, size=(15, 3)))
    once = GeometryService.rotate(cloud, r1 @ r2)
    twice = GeometryService.rotate(GeometryService.rotate(cloud, r2), r1)
    np.testing.assert_allclose(once.positions, twice.positions, atol=1e-9)


@given(seeds, st.floats(min_value=0.0, max_value=2 * math.pi))
def test_random_z_rotation_commutes_with_z_rotations(seed, angle):
    r = GeometryService.random_rotation_z(seed)
    other = GeometryService.rotation_z(angle)
    np.testing.assert_allclose((r @ other).entries, (other @ r).entries, atol=1e-12)


def test_random_z_angles_average_to_pi():
    angles = []
    for seed in range(10_000):
        m = GeometryService.random_rotation_z(seed).entries
        angles.append(math.atan2(m[1, 0], m[0, 0]) % (2 * math.pi))
    assert abs(np.mean(angles) - math.pi) < 0.05


def test_so3_images_of_x_axis_are_centered():
    x_axis = np.array([1.0, 0.0, 0.0])
    images = np.array([GeometryService.random_rotation_so3(seed).entries @ x_axis for seed in range(50_000)])
    assert np.all(np.abs(images.mean(axis=0)) < 0.02)
