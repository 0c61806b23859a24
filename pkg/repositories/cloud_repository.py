import csv
import logging
import os
from io import StringIO
from typing import List, Optional, Tuple

import numpy as np

from models.entities import Dataset, PointCloud
from models.errors import InvalidInputError

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["path", "label_index"]


class CloudRepository:
    # --- Point text files ---
    @staticmethod
    def save_cloud(cloud: PointCloud, path: str) -> None:
        """
        One `x,y,z` row per point, written with full precision so a reload is bitwise equal
        """
        np.savetxt(path, cloud.positions, fmt="%.17g", delimiter=",")

    @staticmethod
    def load_cloud(path: str, label: Optional[int] = None) -> PointCloud:
        """
        Comma separated `x,y,z` rows; whitespace separated rows are accepted too
        """
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
            positions = np.loadtxt(StringIO(text), ndmin=2, delimiter="," if "," in text else None)
        except (OSError, ValueError) as e:
            raise InvalidInputError(f"cannot read point file {path}: {e}") from e
        if positions.ndim != 2 or positions.shape[1] < 3:
            raise InvalidInputError(f"{path}: expected at least 3 columns, got shape {positions.shape}")
        return PointCloud(positions[:, :3], label=label, id=os.path.splitext(os.path.basename(path))[0])

    # --- OFF meshes ---
    @staticmethod
    def read_off(path: str) -> Tuple[np.ndarray, np.ndarray]:
        """
        Vertices [V, 3] and triangles [F, 3]; polygons are fan-triangulated
        """
        with open(path, encoding="utf-8") as f:
            tokens = [line.split("#", 1)[0].strip() for line in f]
        lines = [t for t in tokens if t]
        if not lines or not lines[0].startswith("OFF"):
            raise InvalidInputError(f"{path}: missing OFF header")
        # some exporters glue the counts onto the header line ("OFF490 518 0")
        head = lines[0][3:].strip()
        body = lines[1:]
        if not head:
            head, body = body[0], body[1:]
        try:
            n_vertices, n_faces = (int(v) for v in head.split()[:2])
            vertices = np.array([[float(v) for v in line.split()[:3]] for line in body[:n_vertices]])
            triangles = []
            for line in body[n_vertices:n_vertices + n_faces]:
                values = [int(v) for v in line.split()]
                corners = values[1:1 + values[0]]
                triangles += [[corners[0], corners[i], corners[i + 1]] for i in range(1, len(corners) - 1)]
        except (ValueError, IndexError) as e:
            raise InvalidInputError(f"{path}: malformed OFF body: {e}") from e
        if vertices.shape != (n_vertices, 3) or not triangles:
            raise InvalidInputError(f"{path}: OFF file has no usable faces")
        return vertices, np.array(triangles, dtype=np.int64)

    @staticmethod
    def sample_mesh(vertices: np.ndarray, triangles: np.ndarray, points: int, seed: int) -> np.ndarray:
        """
        Area-weighted uniform surface sampling
        """
        rng = np.random.default_rng(seed)
        a, b, c = (vertices[triangles[:, i]] for i in range(3))
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        total = areas.sum()
        if total <= 0:
            raise InvalidInputError("mesh has zero surface area")
        face = rng.choice(len(triangles), size=points, p=areas / total)
        u, v = rng.random(points), rng.random(points)
        flip = u + v > 1.0
        u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
        return a[face] + u[:, None] * (b[face] - a[face]) + v[:, None] * (c[face] - a[face])

    @staticmethod
    def load_any(path: str, label: Optional[int], points: int, seed: int) -> PointCloud:
        if path.lower().endswith(".off"):
            vertices, triangles = CloudRepository.read_off(path)
            positions = CloudRepository.sample_mesh(vertices, triangles, points, seed)
            return PointCloud(positions, label=label, id=os.path.splitext(os.path.basename(path))[0])
        return CloudRepository.load_cloud(path, label)

    # --- Manifests ---
    @staticmethod
    def write_manifest(path: str, entries: List[Tuple[str, int]]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerows(entries)

    @staticmethod
    def read_manifest(path: str) -> List[Tuple[str, int]]:
        """
        (absolute path, label) pairs from `path,label_index` rows; relative paths resolve
        against the manifest's folder. A leading `path,label_index` header is skipped.
        """
        base = os.path.dirname(os.path.abspath(path))
        entries = []
        try:
            with open(path, newline="", encoding="utf-8") as f:
                for i, row in enumerate(csv.reader(f)):
                    if not row or (i == 0 and row == MANIFEST_HEADER):
                        continue
                    rel, label = row
                    entries.append((os.path.join(base, rel.strip()), int(label)))
        except (OSError, ValueError) as e:
            raise InvalidInputError(f"cannot read manifest {path}: {e}") from e
        return entries

    @staticmethod
    def write_classes(path: str, class_names: List[str]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(class_names) + "\n")

    @staticmethod
    def read_classes(path: str) -> List[str]:
        with open(path, encoding="utf-8") as f:
            return [line.strip() for line in f if line.strip()]

    @staticmethod
    def save_dataset(dataset: Dataset, out_dir: str) -> List[str]:
        """
        Write every cloud plus manifest_train.txt, manifest_test.txt and classes.txt
        """
        cloud_dir = os.path.join(out_dir, "clouds")
        os.makedirs(cloud_dir, exist_ok=True)
        written = []
        for split, clouds in (("train", dataset.train), ("test", dataset.test)):
            entries = []
            for cloud in clouds:
                rel = os.path.join("clouds", f"{cloud.id}.txt")
                CloudRepository.save_cloud(cloud, os.path.join(out_dir, rel))
                entries.append((rel, cloud.label))
            manifest = os.path.join(out_dir, f"manifest_{split}.txt")
            CloudRepository.write_manifest(manifest, entries)
            written.append(manifest)
        classes = os.path.join(out_dir, "classes.txt")
        CloudRepository.write_classes(classes, dataset.class_names)
        written.append(classes)
        logger.info("Wrote %d train / %d test clouds to %s", len(dataset.train), len(dataset.test), out_dir)
        return written

    @staticmethod
    def load_split(manifest: str, points: int, seed: int) -> List[PointCloud]:
        return [CloudRepository.load_any(path, label, points, seed + i)
                for i, (path, label) in enumerate(CloudRepository.read_manifest(manifest))]
