from __future__ import annotations

from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from models.errors import ConfigError

SHAPE_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "capsule", "ellipsoid")

PRESET_CHANNELS = {
    "desk": [12, 24, 48, 96, 192],
    "spe-net-s": [36, 72, 144, 288, 576],
    "spe-net": [72, 144, 288, 576, 1152],
}


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SPEConfig(_Settings):
    in_channels: int
    out_channels: int
    k: int = 16
    radius: float = 0.1
    mlp_layers: int = 1
    maskout_epochs: int = 0

    @model_validator(mode="after")
    def _check(self):
        problems = []
        if self.in_channels < 1:
            problems.append("in_channels must be >= 1")
        if self.out_channels < 3 or self.out_channels % 3:
            problems.append("out_channels must be a positive multiple of 3")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.radius <= 0:
            problems.append("radius must be > 0")
        if self.mlp_layers < 1:
            problems.append("mlp_layers must be >= 1")
        if self.maskout_epochs < 0:
            problems.append("maskout_epochs must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def padded_in_channels(self) -> int:
        return -(-self.in_channels // 3) * 3


class NetworkConfig(_Settings):
    variant: Literal["cd", "zri", "ari", "fused", "sel"] = "sel"
    stage_channels: List[int] = PRESET_CHANNELS["desk"]
    blocks_per_stage: Optional[List[int]] = None
    input_points: int = 512
    stage_points: Optional[List[int]] = None
    base_radius: float = 0.1
    stage_radii: Optional[List[float]] = None
    k: int = 16
    maskout_epochs: int = 0
    mlp_layers: int = 1
    num_classes: int = 5
    head_widths: Optional[List[int]] = None
    dropout: float = 0.5
    embed_input: Literal["radial", "xyz"] = "radial"
    zero_init_residual: bool = False
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="before")
    @classmethod
    def _fill_schedules(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        channels = list(data.get("stage_channels") or PRESET_CHANNELS["desk"])
        stages = len(channels)
        n = int(data.get("input_points", 512))
        base = float(data.get("base_radius", 0.1))
        if data.get("stage_points") is None:
            data["stage_points"] = [max(1, n >> t) for t in range(stages)]
        if data.get("stage_radii") is None:
            data["stage_radii"] = [base * 2 ** t for t in range(stages)]
        if data.get("head_widths") is None and channels:
            last = int(channels[-1])
            data["head_widths"] = [last, max(1, last // 2)]
        if data.get("blocks_per_stage") is None:
            data["blocks_per_stage"] = [1] * stages
        return data

    @model_validator(mode="after")
    def _check(self):
        problems = []
        ch = self.stage_channels
        stages = len(ch)
        if stages < 1:
            problems.append("at least one stage is required")
        if any(b <= a for a, b in zip(ch, ch[1:])):
            problems.append(f"stage_channels must be strictly increasing, got {ch}")
        if any(c < 6 or c % 3 for c in ch):
            problems.append(f"stage_channels must be multiples of 3 and >= 6, got {ch}")
        for name in ("blocks_per_stage", "stage_points", "stage_radii"):
            if len(getattr(self, name)) != stages:
                problems.append(f"{name} must have {stages} entries")
        if any(b < 1 for b in self.blocks_per_stage):
            problems.append("blocks_per_stage entries must be >= 1")
        pts = self.stage_points
        if any(p < 1 for p in pts) or any(b > a for a, b in zip(pts, pts[1:])):
            problems.append(f"stage_points must be positive and non-increasing, got {pts}")
        if pts and pts[0] > self.input_points:
            problems.append("stage_points[0] cannot exceed input_points")
        if any(r <= 0 for r in self.stage_radii):
            problems.append("stage_radii must be > 0")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.maskout_epochs < 0:
            problems.append("maskout_epochs must be >= 0")
        if self.mlp_layers < 1:
            problems.append("mlp_layers must be >= 1")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if not self.head_widths or any(w < 1 for w in self.head_widths):
            problems.append("head_widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "NetworkConfig":
        if name not in PRESET_CHANNELS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESET_CHANNELS)}")
        return build_settings(cls, {"stage_channels": PRESET_CHANNELS[name], **overrides})

    @property
    def stages(self) -> int:
        return len(self.stage_channels)


class TrainConfig(_Settings):
    optimizer: Literal["sgd", "adamw"] = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: Literal["constant", "cosine"] = "cosine"
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    label_smoothing: float = 0.1
    augment_scale: bool = True
    scale_low: float = 0.8
    scale_high: float = 1.2
    noise_sigma: float = 0.01
    maskout_epochs: Optional[int] = None
    progress: bool = True

    @model_validator(mode="after")
    def _check(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            problems.append("label_smoothing must lie in [0, 1)")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2 (batch normalization)")
        if self.scale_low <= 0 or self.scale_high < self.scale_low:
            problems.append("scale range must satisfy 0 < scale_low <= scale_high")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if self.maskout_epochs is not None and self.maskout_epochs < 0:
            problems.append("maskout_epochs must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class DatasetConfig(_Settings):
    classes: List[str] = ["sphere", "cube", "cylinder", "cone", "torus"]
    per_class: int = 100
    points: int = 512
    seed: int = 0
    jitter: float = 0.01
    scale_low: float = 0.8
    scale_high: float = 1.2
    manifest: Optional[str] = None
    test_manifest: Optional[str] = None

    @field_validator("classes")
    @classmethod
    def _known_classes(cls, value):
        unknown = [c for c in value if c not in SHAPE_CLASSES]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}; expected from {list(SHAPE_CLASSES)}")
        return value

    @model_validator(mode="after")
    def _check(self):
        problems = []
        if self.per_class < 1 or self.points < 1:
            problems.append("per_class and points must be >= 1")
        if self.jitter < 0:
            problems.append("jitter must be >= 0")
        if self.scale_low <= 0 or self.scale_high < self.scale_low:
            problems.append("scale range must satisfy 0 < scale_low <= scale_high")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class HarnessConfig(_Settings):
    variants: List[Literal["cd", "zri", "ari", "fused", "sel"]] = ["cd", "zri", "ari", "fused", "sel"]
    regimes: List[Literal["nn", "zz", "zso3", "so3so3"]] = ["nn", "zz", "zso3", "so3so3"]
    seeds: List[int] = [0, 1, 2]
    workers: int = 1
    sel_maskout_epochs: int = 20
    eval_seed: int = 1234
    maskout_sweep: List[int] = [0, 10, 20, 30]

    @model_validator(mode="after")
    def _check(self):
        if not self.seeds or self.workers < 1:
            raise ValueError("seeds must be non-empty and workers >= 1")
        return self


class AppConfig(_Settings):
    net: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DatasetConfig = Field(default_factory=DatasetConfig)
    harness: HarnessConfig = Field(default_factory=HarnessConfig)


def build_settings(model_cls, values: dict):
    """Validate `values` into `model_cls`, turning pydantic errors into ConfigError."""
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        problems = [f"{'.'.join(str(p) for p in err['loc']) or model_cls.__name__}: {err['msg']}"
                    for err in e.errors()]
        raise ConfigError("; ".join(problems)) from e
