import logging
import math
from typing import Tuple

import numpy as np

from models.entities import PointCloud, Rotation, RotationMatrix
from models.errors import InvalidInputError

logger = logging.getLogger(__name__)

_U64 = (1 << 64) - 1


class GeometryService:
    @staticmethod
    def derive_seed(*parts: int) -> int:
        """
        Mix several integers (base seed, epoch, sample index, ...) into one u64 seed
        """
        state = np.random.SeedSequence([int(p) & _U64 for p in parts]).generate_state(2, np.uint32)
        return (int(state[0]) << 32) | int(state[1])

    @staticmethod
    def rotate(cloud: PointCloud, rotation: RotationMatrix) -> PointCloud:
        """
        Apply R to every point (row vectors, so p' = p @ R^T)
        """
        return cloud.with_positions(cloud.positions @ rotation.entries.T)

    @staticmethod
    def rotation_z(angle: float) -> RotationMatrix:
        c, s = math.cos(angle), math.sin(angle)
        return RotationMatrix(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))

    @staticmethod
    def rotation_x(angle: float) -> RotationMatrix:
        c, s = math.cos(angle), math.sin(angle)
        return RotationMatrix(np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]))

    @staticmethod
    def random_rotation_z(seed: int) -> RotationMatrix:
        """
        Rotation about Z by an angle uniform in [0, 2*pi)
        """
        rng = np.random.default_rng(seed)
        return GeometryService.rotation_z(rng.uniform(0.0, 2.0 * math.pi))

    @staticmethod
    def quaternion_matrix(q: np.ndarray) -> np.ndarray:
        w, x, y, z = q / np.linalg.norm(q)
        return np.array([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])

    @staticmethod
    def random_rotation_so3(seed: int) -> RotationMatrix:
        """
        Haar-uniform rotation: four standard normals, normalized to a unit quaternion
        """
        rng = np.random.default_rng(seed)
        q = rng.standard_normal(4)
        while np.linalg.norm(q) < 1e-12:
            q = rng.standard_normal(4)
        return RotationMatrix(GeometryService.quaternion_matrix(q))

    @staticmethod
    def random_rotation(kind: Rotation, seed: int) -> RotationMatrix:
        if kind == Rotation.NONE:
            return RotationMatrix.identity()
        if kind == Rotation.Z:
            return GeometryService.random_rotation_z(seed)
        if kind == Rotation.SO3:
            return GeometryService.random_rotation_so3(seed)
        raise InvalidInputError(f"unknown rotation kind {kind!r}")

    @staticmethod
    def normalize_cloud(cloud: PointCloud) -> Tuple[PointCloud, bool]:
        """
        Center on the centroid and scale the farthest point to norm 1.
        Returns (cloud, degenerate); degenerate clouds are centered but not scaled.
        """
        pos = cloud.positions
        centered = pos - pos.mean(axis=0)
        radius = float(np.sqrt((centered ** 2).sum(axis=1)).max())
        if radius <= 1e-12:
            logger.warning("cloud %r has all points identical; skipping scale", cloud.id)
            return cloud.with_positions(np.zeros_like(pos)), True
        return cloud.with_positions(centered / radius), False
