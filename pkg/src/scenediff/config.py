"""Run configuration: nested dataclasses loaded from YAML or JSON with full
defaulting, plus the desk-scale preset used by the tests and examples."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .diffusion import DiffusionConfig
from .evaluation import EvalConfig
from .graph import D_BOX, N_MAX, FeatureToggles, embedding_dim
from .readout import ReadoutConfig
from .synthetic import ConfigError, SceneConfig
from .unet import DenoiserConfig

ARTIFACT_ROOT_ENV = "SCENEDIFF_ARTIFACTS"


@dataclass
class GraphConfig:
    n_max: int = N_MAX
    d_box: int = D_BOX
    union: bool = True
    subject_feature: bool = True
    subject_location: bool = True
    # kept for real-image readers; synthetic features ignore it
    image_max_edge: int = 720

    @property
    def toggles(self) -> FeatureToggles:
        return FeatureToggles(self.union, self.subject_feature, self.subject_location)


@dataclass
class TemporalConfig:
    conditioning: bool = True
    motion: bool = False
    # fixed gain applied to the speed matrix before it is added
    motion_scale: float = 1.0
    history: int = 8
    new_object_threshold: float = 0.2


@dataclass
class Stage1Config:
    lr: float = 1e-4
    pairs_per_batch: int = 2048
    epochs: int = 100
    clip_length: int = 5
    seed: int = 0
    # fixed held-out protocol for the logged evaluation loss
    eval_frames: int = 256
    eval_seed: int = 12345


@dataclass
class Stage2Config:
    lr: float = 1e-5
    decay_factor: float = 0.2
    # fraction of the total optimizer steps at which the decay happens
    decay_at: float = 0.5
    batch_frames: int = 8
    epochs: int = 10
    weight_decay: float = 1e-2
    seed: int = 0


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    readout: ReadoutConfig = field(default_factory=ReadoutConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def sync(self) -> "RunConfig":
        """Derive dependent sizes (embedding width, class counts) from the scene."""
        d = embedding_dim(self.scene.d_obj, self.graph.d_box)
        self.denoiser.d_embed = d
        self.readout.d_embed = d
        self.readout.num_predicates = len(self.scene.active_predicates())
        self.readout.num_objects = self.scene.object_classes
        return self

    def validate(self) -> None:
        self.sync()
        self.scene.validate(self.graph.n_max)
        self.diffusion.validate()
        self.denoiser.validate()
        self.readout.validate()
        self.eval.validate()
        for name, value in [
            ("stage1.lr", self.stage1.lr), ("stage2.lr", self.stage2.lr),
            ("stage1.epochs", self.stage1.epochs), ("stage2.epochs", self.stage2.epochs),
            ("stage1.pairs_per_batch", self.stage1.pairs_per_batch), ("stage2.batch_frames", self.stage2.batch_frames),
            ("stage1.clip_length", self.stage1.clip_length), ("graph.n_max", self.graph.n_max),
        ]:
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if not 0 < self.stage2.decay_factor <= 1 or not 0 <= self.stage2.decay_at <= 1:
            raise ConfigError("stage2 decay_factor must be in (0, 1] and decay_at in [0, 1]")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_TUPLE_FIELDS = {"image_size", "speed_range", "size_range", "ks", "predicate_names"}


def _build(cls, data: dict | None):
    data = dict(data or {})
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if cls is not RunConfig else None
        if dataclasses.is_dataclass(default) or (cls is RunConfig and name in _SECTIONS):
            sub = _SECTIONS[name] if cls is RunConfig else type(default)
            kwargs[name] = _build(sub, value)
        elif name in _TUPLE_FIELDS and value is not None:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "scene": SceneConfig, "graph": GraphConfig, "diffusion": DiffusionConfig, "denoiser": DenoiserConfig,
    "temporal": TemporalConfig, "readout": ReadoutConfig, "stage1": Stage1Config, "stage2": Stage2Config,
    "eval": EvalConfig,
}


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data).sync()


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def desk_overrides() -> dict:
    """Settings sized for a single CPU: small slot grid and faster learning rates."""
    return {
        "graph": {"n_max": 8},
        "scene": {"predicate_classes": 10},
        "stage1": {"lr": 2e-3, "epochs": 20},
        "stage2": {"lr": 1e-3, "epochs": 10},
    }


def desk_config(**sections) -> RunConfig:
    return config_from_dict(merge(desk_overrides(), sections))


def load_config(path: str | Path | None, *, desk: bool = False) -> RunConfig:
    """YAML or JSON file (missing keys take defaults); ``desk`` layers the desk preset underneath."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = json.loads(text) if str(path).endswith(".json") else (yaml.safe_load(text) or {})
    if desk:
        data = merge(desk_overrides(), data)
    cfg = config_from_dict(data)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path


def artifact_root() -> Path:
    return Path(os.environ.get(ARTIFACT_ROOT_ENV, "artifacts"))


def resolve_artifact(path: str | Path) -> Path:
    """Relative paths land under the artifact root; absolute paths are kept."""
    p = Path(path)
    return p if p.is_absolute() else artifact_root() / p


def nested_get(cfg: Any, dotted: str):
    obj = cfg
    for part in dotted.split("."):
        obj = getattr(obj, part)
    return obj


def nested_set(cfg: Any, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    obj = cfg
    for part in head:
        obj = getattr(obj, part)
    if not hasattr(obj, last):
        raise ConfigError(f"unknown config field {dotted}")
    setattr(obj, last, value)
