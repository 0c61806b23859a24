import logging
from typing import Dict, Iterable

import numpy as np

from models.entities import (EncodingKind, EncodingTensor, EncodingVector, NeighborhoodIndex, PointCloud)
from models.errors import InvalidInputError
from services.neighborhood_service import NeighborhoodService

logger = logging.getLogger(__name__)

_EPS = 1e-12


# Kernels work on [..., 3] arrays with elementwise arithmetic only, so a scalar
# call and a batched call produce bitwise-identical entries.
def _norm(v):
    return np.sqrt(v[..., 0] * v[..., 0] + v[..., 1] * v[..., 1] + v[..., 2] * v[..., 2])


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _cross(a, b):
    return np.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def cd_kernel(pi, pj):
    return pj - pi


def zri_kernel(pi, pj):
    pi, pj = np.broadcast_arrays(pi, pj)
    dz = pj[..., 2] - pi[..., 2]
    dx = pj[..., 0] - pi[..., 0]
    dy = pj[..., 1] - pi[..., 1]
    r_ij = np.sqrt(dx * dx + dy * dy)
    r_i = np.sqrt(pi[..., 0] * pi[..., 0] + pi[..., 1] * pi[..., 1])
    r_j = np.sqrt(pj[..., 0] * pj[..., 0] + pj[..., 1] * pj[..., 1])
    cross = pi[..., 0] * pj[..., 1] - pi[..., 1] * pj[..., 0]
    dot = pi[..., 0] * pj[..., 0] + pi[..., 1] * pj[..., 1]
    theta = np.arctan2(np.abs(cross), dot)
    theta = np.where((r_i < _EPS) | (r_j < _EPS), 0.0, theta)
    return np.stack([dz, r_ij, r_i, r_j, theta], axis=-1)


def ari_kernel(pi, pj, m, s):
    pi, pj, m, s = np.broadcast_arrays(pi, pj, m, s)
    axis = s - pi
    axis_len = _norm(axis)
    u = axis / np.where(axis_len > _EPS, axis_len, 1.0)[..., None]

    a = m - pi
    b = pj - pi
    a_perp = a - _dot(a, u)[..., None] * u
    b_perp = b - _dot(b, u)[..., None] * u
    y = _dot(u, _cross(a_perp, b_perp))
    x = _dot(a_perp, b_perp)
    theta = np.arctan2(y, x)
    theta = np.where(theta <= -np.pi, np.pi, theta)
    degenerate = (_norm(a_perp) <= _EPS) | (_norm(b_perp) <= _EPS) | (axis_len <= _EPS)
    theta = np.where(degenerate, 0.0, theta)

    return np.stack([
        _norm(pi),
        _norm(m - s),
        axis_len,
        _norm(pi - m),
        _norm(s - pj),
        _norm(m - pj),
        _norm(pi - pj),
        theta,
    ], axis=-1)


def _point(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"expected a finite 3D point, got {p!r}")
    return arr


class EncodingService:
    @staticmethod
    def encode_cd(p_i, p_j) -> EncodingVector:
        """
        Coordinate difference p_j - p_i
        """
        return EncodingVector(EncodingKind.CD, cd_kernel(_point(p_i), _point(p_j)))

    @staticmethod
    def encode_zri(p_i, p_j) -> EncodingVector:
        """
        [dz, projected distance, projected radii of p_i and p_j, projected angle at the origin]
        """
        return EncodingVector(EncodingKind.ZRI, zri_kernel(_point(p_i), _point(p_j)))

    @staticmethod
    def encode_ari(p_i, p_j, m_i, s_i) -> EncodingVector:
        return EncodingVector(EncodingKind.ARI, ari_kernel(_point(p_i), _point(p_j), _point(m_i), _point(s_i)))

    @staticmethod
    def encode_positions(positions: np.ndarray, query_indices: np.ndarray, neighbor_lists: np.ndarray,
                         radius: float, kinds: Iterable[EncodingKind]) -> Dict[EncodingKind, np.ndarray]:
        """
        Batched encodings for M queries x K neighbors, float64, keyed by kind
        """
        pos = np.asarray(positions, dtype=np.float64)
        q = np.asarray(query_indices, dtype=np.int64)
        nbrs = np.asarray(neighbor_lists, dtype=np.int64)
        pi = pos[q][:, None, :]
        pj = pos[nbrs]
        out = {}
        for kind in kinds:
            if kind == EncodingKind.CD:
                out[kind] = cd_kernel(pi, pj)
            elif kind == EncodingKind.ZRI:
                out[kind] = zri_kernel(pi, pj)
            elif kind == EncodingKind.ARI:
                centers = NeighborhoodService.center_points(pos, nbrs)
                m = pos[centers][:, None, :]
                s = NeighborhoodService.support_intersections(pos[q], radius)[:, None, :]
                out[kind] = ari_kernel(pi, pj, m, s)
            else:
                raise InvalidInputError(f"unknown encoding kind {kind!r}")
        return out

    @staticmethod
    def encode_batch(cloud: PointCloud, nbrs: NeighborhoodIndex, kind: EncodingKind) -> EncodingTensor:
        kind = EncodingKind(kind)
        values = EncodingService.encode_positions(
            cloud.positions, nbrs.query_indices, nbrs.neighbor_lists, nbrs.radius, [kind])[kind]
        return EncodingTensor(kind, values)
