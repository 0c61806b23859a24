from typing import Sequence

import numpy as np

from models.entities import NeighborhoodIndex, PointCloud, SupportPoints
from models.errors import InvalidInputError

# relative tolerance under which two mean distances count as a tie
_CENTER_TIE_RTOL = 1e-12


def _positions(points) -> np.ndarray:
    return points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)


def _distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - points[None, :, :]
    return np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2)


class NeighborhoodService:
    @staticmethod
    def ball_query(points, queries: Sequence[int], radius: float, k: int, seed: int = 0) -> NeighborhoodIndex:
        """
        Up to K in-radius neighbors per query in ascending distance (ties: lowest index).
        Short lists repeat cyclically; an empty ball falls back to the nearest point.
        `seed` is accepted for interface stability; the query is deterministic.
        """
        pos = _positions(points)
        if pos.shape[0] == 0:
            raise InvalidInputError("ball query on an empty point set")
        if radius <= 0 or k < 1:
            raise InvalidInputError(f"ball query needs radius > 0 and K >= 1, got radius={radius}, K={k}")
        q_idx = np.asarray(queries, dtype=np.int64).reshape(-1)
        return NeighborhoodIndex(
            query_indices=q_idx,
            neighbor_lists=NeighborhoodService.ball_query_positions(pos, pos[q_idx], radius, k),
            radius=float(radius),
            k=int(k),
        )

    @staticmethod
    def ball_query_positions(points: np.ndarray, query_points: np.ndarray, radius: float, k: int) -> np.ndarray:
        if points.shape[0] == 0:
            raise InvalidInputError("ball query on an empty point set")
        dist = _distances(np.asarray(query_points, dtype=np.float64), points)
        inside = dist <= radius
        masked = np.where(inside, dist, np.inf)
        order = np.argsort(masked, axis=1, kind="stable")
        counts = inside.sum(axis=1)

        m = dist.shape[0]
        slots = np.arange(k)[None, :]
        cyclic = slots % np.maximum(counts, 1)[:, None]
        nbrs = np.take_along_axis(order, cyclic, axis=1)
        empty = counts == 0
        if np.any(empty):
            nearest = np.argmin(dist[empty], axis=1)
            nbrs[empty] = nearest[:, None]
        return nbrs.reshape(m, k).astype(np.int64)

    @staticmethod
    def farthest_point_sample(points, m: int) -> np.ndarray:
        """
        Greedy farthest point sampling starting at index 0, ties to the lowest index
        """
        pos = _positions(points)
        n = pos.shape[0]
        if not 1 <= m <= n:
            raise InvalidInputError(f"cannot sample {m} of {n} points")
        selected = np.zeros(m, dtype=np.int64)
        min_dist = np.full(n, np.inf)
        current = 0
        for i in range(m):
            selected[i] = current
            d = pos - pos[current]
            min_dist = np.minimum(min_dist, d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2)
            # chosen points never win again, even when duplicates leave every distance at 0
            min_dist[current] = -1.0
            current = int(np.argmax(min_dist))
        return selected

    @staticmethod
    def center_points(points: np.ndarray, neighbor_lists: np.ndarray) -> np.ndarray:
        """
        Batched center selection: per row, the distinct neighbor with minimal mean
        distance to the other distinct neighbors (ties: lowest point index).
        """
        nbrs = np.asarray(neighbor_lists, dtype=np.int64)
        m, k = nbrs.shape
        # earlier equal index -> padding duplicate
        same = nbrs[:, :, None] == nbrs[:, None, :]
        duplicate = np.triu(np.ones((k, k), dtype=bool), 1).T[None] & same
        distinct = ~duplicate.any(axis=2)

        p = points[nbrs]
        diff = p[:, :, None, :] - p[:, None, :, :]
        dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2)
        others = distinct[:, None, :] & ~np.eye(k, dtype=bool)[None]
        n_other = others.sum(axis=2)
        mean = np.where(n_other > 0, (dist * others).sum(axis=2) / np.maximum(n_other, 1), 0.0)
        mean = np.where(distinct, mean, np.inf)

        best = mean.min(axis=1, keepdims=True)
        tie = mean <= best + _CENTER_TIE_RTOL * np.maximum(1.0, best)
        candidates = np.where(tie & distinct, nbrs, np.iinfo(np.int64).max)
        return candidates.min(axis=1)

    @staticmethod
    def center_point(points, neighbor_list: Sequence[int]) -> int:
        """
        Index of m_i for one neighbor list
        """
        nbrs = np.asarray(neighbor_list, dtype=np.int64).reshape(1, -1)
        if nbrs.size == 0:
            raise InvalidInputError("center point of an empty neighbor list")
        return int(NeighborhoodService.center_points(_positions(points), nbrs)[0])

    @staticmethod
    def support_intersections(queries: np.ndarray, radius: float) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64)
        norm = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2 + q[..., 2] ** 2)[..., None]
        up = np.zeros_like(q)
        up[..., 2] = radius
        safe = np.where(norm > 1e-12, norm, 1.0)
        return np.where(norm > 1e-12, q + radius * (q / safe), q + up)

    @staticmethod
    def support_intersection(query, radius: float) -> np.ndarray:
        """
        s_i: where the ray from the origin through the query leaves the query ball
        """
        if radius <= 0:
            raise InvalidInputError(f"radius must be > 0, got {radius}")
        return NeighborhoodService.support_intersections(np.asarray(query, dtype=np.float64), radius)

    @staticmethod
    def support_points(points, query_index: int, neighbor_list: Sequence[int], radius: float) -> SupportPoints:
        pos = _positions(points)
        center = NeighborhoodService.center_point(pos, neighbor_list)
        position_in_list = int(list(np.asarray(neighbor_list)).index(center))
        return SupportPoints(
            center_index=position_in_list,
            center=pos[center].copy(),
            intersection=NeighborhoodService.support_intersection(pos[query_index], radius),
            radius=float(radius),
        )
