import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from models.entities import BRANCH_ORDER, EncodingKind, EncodingVector, PointCloud
from models.errors import InvalidInputError, ShapeMismatchError
from services.encoding_service import EncodingService
from services.geometry_service import GeometryService
from services.neighborhood_service import NeighborhoodService

coords = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)
points = st.tuples(coords, coords, coords)
seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)


def _encode_cloud(positions, radius=0.5, k=8):
    index = NeighborhoodService.ball_query(positions, np.arange(len(positions)), radius, k)
    return EncodingService.encode_positions(positions, index.query_indices, index.neighbor_lists,
                                            radius, BRANCH_ORDER)


# --- coordinate difference ---
def test_cd_is_a_difference():
    out = EncodingService.encode_cd((1, 2, 3), (4, 6, 8))
    assert out.kind == EncodingKind.CD
    np.testing.assert_array_equal(out.values, [3.0, 4.0, 5.0])


def test_cd_of_same_point_is_zero():
    np.testing.assert_array_equal(EncodingService.encode_cd((1, 2, 3), (1, 2, 3)).values, np.zeros(3))


@given(points, points, seeds)
def test_cd_rotates_with_the_input(p_i, p_j, seed):
    r = GeometryService.random_rotation_so3(seed).entries
    a = EncodingService.encode_cd(r @ np.array(p_i), r @ np.array(p_j)).values
    b = r @ EncodingService.encode_cd(p_i, p_j).values
    np.testing.assert_allclose(a, b, atol=1e-12 * max(1.0, np.abs(p_i).max(), np.abs(p_j).max()) * 10)


# --- Z-rotation invariant ---
def test_zri_orthogonal_unit_projections():
    out = EncodingService.encode_zri((1, 0, 5), (0, 1, 7)).values
    np.testing.assert_allclose(out, [2.0, math.sqrt(2.0), 1.0, 1.0, math.pi / 2], atol=1e-15)


def test_zri_coincident_points():
    out = EncodingService.encode_zri((1, 2, 3), (1, 2, 3)).values
    np.testing.assert_allclose(out, [0.0, 0.0, math.sqrt(5.0), math.sqrt(5.0), 0.0], atol=1e-15)


def test_zri_angle_is_zero_on_the_z_axis():
    assert EncodingService.encode_zri((0, 0, 1), (1, 1, 0)).values[4] == 0.0


def test_zri_invariant_to_z_rotation():
    r = GeometryService.rotation_z(0.7).entries
    p_i, p_j = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])
    np.testing.assert_allclose(EncodingService.encode_zri(r @ p_i, r @ p_j).values,
                               EncodingService.encode_zri(p_i, p_j).values, atol=1e-12)


def test_zri_changes_under_x_quarter_turn():
    r = GeometryService.rotation_x(math.pi / 2).entries
    p_i, p_j = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])
    before = EncodingService.encode_zri(p_i, p_j).values
    after = EncodingService.encode_zri(r @ p_i, r @ p_j).values
    assert np.abs(after - before).max() >= 1e-3
    assert np.abs(EncodingService.encode_cd(r @ p_i, r @ p_j).values
                  - EncodingService.encode_cd(p_i, p_j).values).max() >= 1e-3


@given(points, points)
def test_zri_angle_in_range(p_i, p_j):
    theta = EncodingService.encode_zri(p_i, p_j).values[4]
    assert 0.0 <= theta <= math.pi


# --- azimuth-free rotation invariant ---
def test_ari_worked_example():
    out = EncodingService.encode_ari((2, 0, 0), (2, 0, 1), (2, 1, 0), (3, 0, 0)).values
    r2 = math.sqrt(2.0)
    np.testing.assert_allclose(out, [2.0, r2, 1.0, 1.0, r2, r2, 1.0, math.pi / 2], atol=1e-12)


def test_ari_dihedral_sign_flips_with_mirrored_neighbor():
    out = EncodingService.encode_ari((2, 0, 0), (2, 0, -1), (2, 1, 0), (3, 0, 0)).values
    assert out[7] == pytest.approx(-math.pi / 2, abs=1e-12)


def test_ari_dihedral_is_zero_when_neighbor_is_on_the_axis():
    out = EncodingService.encode_ari((2, 0, 0), (5, 0, 0), (2, 1, 0), (3, 0, 0)).values
    assert out[7] == 0.0


@given(points, points, points, seeds)
def test_ari_angle_in_range(p_i, p_j, m, seed):
    s = NeighborhoodService.support_intersection(p_i, 0.2)
    theta = EncodingService.encode_ari(p_i, p_j, m, s).values[7]
    assert -math.pi < theta <= math.pi


@pytest.mark.parametrize("seed", range(10))
def test_ari_invariant_to_any_rotation(seed):
    positions = np.random.default_rng(seed).uniform(-1, 1, size=(48, 3))
    rotated = positions @ GeometryService.random_rotation_so3(seed).entries.T
    a = _encode_cloud(positions)[EncodingKind.ARI]
    b = _encode_cloud(rotated)[EncodingKind.ARI]
    np.testing.assert_allclose(a, b, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_zri_batch_invariant_to_z_rotation(seed):
    positions = np.random.default_rng(seed).uniform(-1, 1, size=(48, 3))
    rotated = positions @ GeometryService.random_rotation_z(seed).entries.T
    np.testing.assert_allclose(_encode_cloud(positions)[EncodingKind.ZRI],
                               _encode_cloud(rotated)[EncodingKind.ZRI], atol=1e-9)


# --- batched form ---
def test_batched_entries_match_scalar_calls(rng):
    positions = rng.uniform(-1, 1, size=(24, 3))
    radius = 0.6
    index = NeighborhoodService.ball_query(positions, np.arange(24), radius, 5)
    enc = EncodingService.encode_positions(positions, index.query_indices, index.neighbor_lists, radius,
                                           BRANCH_ORDER)
    for q, row in zip(index.query_indices, index.neighbor_lists):
        m = positions[NeighborhoodService.center_point(positions, row)]
        s = NeighborhoodService.support_intersection(positions[q], radius)
        for slot, j in enumerate(row):
            p_i, p_j = positions[q], positions[j]
            np.testing.assert_allclose(enc[EncodingKind.CD][q, slot],
                                       EncodingService.encode_cd(p_i, p_j).values, atol=1e-12)
            np.testing.assert_allclose(enc[EncodingKind.ZRI][q, slot],
                                       EncodingService.encode_zri(p_i, p_j).values, atol=1e-12)
            np.testing.assert_allclose(enc[EncodingKind.ARI][q, slot],
                                       EncodingService.encode_ari(p_i, p_j, m, s).values, atol=1e-12)


def test_encode_batch_shapes(rng):
    cloud = PointCloud(rng.uniform(-1, 1, size=(16, 3)))
    index = NeighborhoodService.ball_query(cloud, np.arange(16), 0.5, 4)
    for kind in BRANCH_ORDER:
        tensor = EncodingService.encode_batch(cloud, index, kind)
        assert tensor.values.shape == (16, 4, kind.width)
        assert np.all(np.isfinite(tensor.values))


def test_encoding_vector_width_is_checked():
    with pytest.raises(ShapeMismatchError):
        EncodingVector(EncodingKind.ZRI, np.zeros(3))


def test_scalar_encoders_reject_bad_points():
    with pytest.raises(InvalidInputError):
        EncodingService.encode_cd((1, 2), (3, 4, 5))
    with pytest.raises(InvalidInputError):
        EncodingService.encode_zri((np.inf, 0, 0), (0, 0, 0))
