"""Experiment configuration: strict JSON with dataclass sections.

Unknown keys are rejected so typos fail loudly; every path present in
the config must resolve at load time.  The config hash (sha256 of the
canonical JSON) ties reports back to the exact configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ValidationError

STAGES = ("make-scene", "gradcheck", "train", "sample", "distill", "ablate", "heatmap", "report")


@dataclass
class ScheduleSection:
    steps: int = 100
    beta_min: float | None = None  # None -> scaled default
    beta_max: float | None = None
    weighting: str = "uniform"  # or "closed_form"


@dataclass
class GridSection:
    resolution: int = 16
    channels: int = 16
    highres_resolution: int = 32


@dataclass
class ModelSection:
    decoder_hidden: tuple = (32,)
    denoiser3d_base: int = 16
    denoiser2d_base: int = 16
    encoder_widths: tuple = (8, 12)
    accumulator_hidden: int = 32


@dataclass
class SceneSection:
    count: int = 5
    blobs: int = 3
    grid_resolution: int = 32
    image_size: int = 64
    frame_count: int = 24
    camera_radius: float = 2.8
    camera_elevation_deg: float = 0.0
    fov_y_deg: float = 45.0
    samples_per_ray: int = 64


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 5e-5
    source_frames: int = 15
    target_frames: int = 4
    empty_cond_prob: float = 0.2
    samples_per_ray: int = 32
    superres_targets: int = 1
    couple_superres: bool = False
    plateau_window: int = 200
    plateau_tol: float = 0.01


@dataclass
class DistillSection:
    patch_size: int = 16
    steps: int = 25000
    lr: float = 2e-4
    loss: str = "patch-remix"
    cameras: int = 40
    camera_radius: float = 2.8
    camera_elevation_deg: float = 0.0
    image_size: int = 64
    low_res_size: int = 32
    hypotheses: int = 5
    minibatch: int = 4
    samples_per_ray: int = 64
    heldout_cameras: int = 8
    bank_source: str = "oracle"  # or "checkpoint" / "disk"
    heatmap_hypotheses: int = 10  # stack size for the variance diagnostic


@dataclass
class PathsSection:
    out_dir: str = "out"
    dataset: str | None = None
    checkpoint: str | None = None
    bank: str | None = None
    report: str | None = None


@dataclass
class ExperimentConfig:
    stage: str = "gradcheck"
    seed: int = 0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    grid: GridSection = field(default_factory=GridSection)
    model: ModelSection = field(default_factory=ModelSection)
    scene: SceneSection = field(default_factory=SceneSection)
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillSection = field(default_factory=DistillSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}; one of {STAGES}")

    def to_dict(self) -> dict:
        def conv(obj):
            if is_dataclass(obj):
                return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return conv(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def resolve_paths(self, base: Path | None = None) -> None:
        """Make paths absolute and require referenced inputs to exist."""
        base = Path(base) if base else Path.cwd()
        p = self.paths
        p.out_dir = str((base / p.out_dir).resolve())
        for name in ("dataset", "checkpoint", "bank", "report"):
            value = getattr(p, name)
            if value is None:
                continue
            resolved = (base / value).resolve()
            if not resolved.exists():
                raise ValidationError(f"paths.{name} does not resolve: {resolved}")
            setattr(p, name, str(resolved))


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ValidationError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        has_factory = f.default_factory is not dataclasses.MISSING
        if has_factory and is_dataclass(f.default_factory()):
            kwargs[name] = _build(type(f.default_factory()), value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"config is not valid JSON: {e}") from e
    cfg = config_from_dict(data)
    cfg.resolve_paths(path.parent)
    return cfg


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply dotted-key overrides ('train.lr') on top of a config."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node:
                raise ValidationError(f"unknown config section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValidationError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)
