from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.errors import InvalidInputError, ShapeMismatchError


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


# --- 1. PointCloud Entity ---
@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    label: Optional[int] = None
    id: str = ""

    def __post_init__(self):
        pos = _frozen_array(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InvalidInputError(f"positions must be N x 3, got shape {pos.shape}")
        if pos.shape[0] < 1:
            raise InvalidInputError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pos)):
            raise InvalidInputError(f"cloud {self.id!r} has non-finite coordinates")
        object.__setattr__(self, "positions", pos)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        return PointCloud(positions=positions, label=self.label, id=self.id)

    def __repr__(self):
        return f"<PointCloud {self.id or '?'} n={self.size} label={self.label}>"


# --- 2. RotationMatrix Entity ---
@dataclass(frozen=True, eq=False)
class RotationMatrix:
    entries: np.ndarray

    def __post_init__(self):
        m = _frozen_array(self.entries)
        if m.shape != (3, 3):
            raise ShapeMismatchError(f"rotation must be 3 x 3, got {m.shape}")
        object.__setattr__(self, "entries", m)

    @classmethod
    def identity(cls) -> "RotationMatrix":
        return cls(np.eye(3))

    def transpose(self) -> "RotationMatrix":
        return RotationMatrix(self.entries.T)

    def __matmul__(self, other: "RotationMatrix") -> "RotationMatrix":
        return RotationMatrix(self.entries @ other.entries)

    def is_proper(self, tol: float = 1e-12) -> bool:
        m = self.entries
        orthonormal = np.allclose(m @ m.T, np.eye(3), rtol=0.0, atol=tol)
        return bool(orthonormal and abs(np.linalg.det(m) - 1.0) <= tol)


# --- 3. Neighborhood Entities ---
@dataclass(frozen=True, eq=False)
class NeighborhoodIndex:
    query_indices: np.ndarray   # [M]
    neighbor_lists: np.ndarray  # [M, K]
    radius: float
    k: int

    @property
    def size(self) -> int:
        return self.query_indices.shape[0]


@dataclass(frozen=True, eq=False)
class SupportPoints:
    center_index: int
    center: np.ndarray
    intersection: np.ndarray
    radius: float


# --- 4. Encoding Entities ---
class EncodingKind(str, enum.Enum):
    CD = "cd"
    ZRI = "zri"
    ARI = "ari"

    @property
    def width(self) -> int:
        return ENCODING_WIDTHS[self]

    @property
    def columns(self) -> Tuple[str, ...]:
        return ENCODING_COLUMNS[self]


ENCODING_WIDTHS = {EncodingKind.CD: 3, EncodingKind.ZRI: 5, EncodingKind.ARI: 8}

ENCODING_COLUMNS = {
    EncodingKind.CD: ("dx", "dy", "dz"),
    EncodingKind.ZRI: ("dz", "r_xy_ij", "r_xy_i", "r_xy_j", "theta_xy_ij"),
    EncodingKind.ARI: ("r_i", "r_ms_i", "r_ps_i", "r_pm_i", "r_sp_ij", "r_mp_ij", "r_pp_ij", "theta_mp_ij"),
}

BRANCH_ORDER = (EncodingKind.CD, EncodingKind.ZRI, EncodingKind.ARI)


@dataclass(frozen=True, eq=False)
class EncodingVector:
    kind: EncodingKind
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.kind.width,):
            raise ShapeMismatchError(
                f"{self.kind.name} encoding needs width {self.kind.width}, got {self.values.shape}")


@dataclass(frozen=True, eq=False)
class EncodingTensor:
    kind: EncodingKind
    values: np.ndarray  # [M, K, width]

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != self.kind.width:
            raise ShapeMismatchError(
                f"{self.kind.name} encoding tensor needs M x K x {self.kind.width}, got {self.values.shape}")


@dataclass(frozen=True, eq=False)
class LocalGroup:
    """Rows of a stacked feature matrix grouped for one local aggregation."""
    query_rows: np.ndarray     # [M]
    neighbor_rows: np.ndarray  # [M, K]
    encodings: Dict[EncodingKind, np.ndarray]  # kind -> [M, K, width], float64
    query_positions: Optional[np.ndarray] = None  # [M, 3]

    @property
    def size(self) -> int:
        return self.query_rows.shape[0]

    @property
    def k(self) -> int:
        return self.neighbor_rows.shape[1]


# --- 5. Attention Entity ---
@dataclass(frozen=True, eq=False)
class AttentionWeights:
    values: np.ndarray  # [M, 3, width]

    @property
    def alpha1(self) -> np.ndarray:
        return self.values[:, 0, :]

    @property
    def alpha2(self) -> np.ndarray:
        return self.values[:, 1, :]

    @property
    def alpha3(self) -> np.ndarray:
        return self.values[:, 2, :]

    def branch_means(self) -> np.ndarray:
        """Per-point mean weight of each branch, [M, 3]."""
        return self.values.mean(axis=2)


# --- 6. Regime Entities ---
class Rotation(str, enum.Enum):
    NONE = "none"
    Z = "z"
    SO3 = "so3"


@dataclass(frozen=True)
class Regime:
    train_rotation: Rotation
    test_rotation: Rotation

    @property
    def name(self) -> str:
        return _REGIME_NAMES[(self.train_rotation, self.test_rotation)]

    @classmethod
    def from_name(cls, name: str) -> "Regime":
        for key, value in _REGIME_NAMES.items():
            if value == name.lower():
                return cls(*key)
        raise InvalidInputError(f"unknown regime {name!r}; expected one of {sorted(_REGIME_NAMES.values())}")


_REGIME_NAMES = {
    (Rotation.NONE, Rotation.NONE): "nn",
    (Rotation.Z, Rotation.Z): "zz",
    (Rotation.Z, Rotation.SO3): "zso3",
    (Rotation.SO3, Rotation.SO3): "so3so3",
}

REGIMES = tuple(Regime(*key) for key in _REGIME_NAMES)

VARIANTS = ("cd", "zri", "ari", "fused", "sel")


# --- 7. Dataset Entity ---
@dataclass
class Dataset:
    train: List[PointCloud]
    test: List[PointCloud]
    class_names: List[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# --- 8. Training Record Entities ---
@dataclass
class History:
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)
    eval_accuracies: List[float] = field(default_factory=list)
    epoch_times: List[float] = field(default_factory=list)

    @property
    def wall_time(self) -> float:
        return float(sum(self.epoch_times))

    @property
    def epochs(self) -> int:
        return len(self.losses)


@dataclass
class CellResult:
    variant: str
    regime: Regime
    accuracies: List[float] = field(default_factory=list)  # one per seed
    failed: bool = False
    error: Optional[str] = None

    @property
    def mean_accuracy(self) -> Optional[float]:
        if self.failed or not self.accuracies:
            return None
        return float(np.mean(self.accuracies))


@dataclass
class RegimeMatrix:
    cells: Dict[Tuple[str, str], CellResult] = field(default_factory=dict)
    parameter_counts: Dict[str, int] = field(default_factory=dict)
    histories: Dict[Tuple[str, str, int], History] = field(default_factory=dict)  # (variant, train rot, seed)
    num_classes: Optional[int] = None

    def cell(self, variant: str, regime: str) -> CellResult:
        return self.cells[(variant, regime)]

    def accuracy(self, variant: str, regime: str) -> Optional[float]:
        result = self.cells.get((variant, regime))
        return None if result is None else result.mean_accuracy
