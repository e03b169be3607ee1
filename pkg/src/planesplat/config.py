"""Run configuration: one JSON document, loaded into nested dataclasses."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .losses import LAMBDAS
from .lp3 import Lp3Config
from .splat import InitConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    cameras: str = "cameras.json"
    images: str = "images"
    depth_prior: str = "depth_prior"
    confidence: str = "confidence"
    sparse: str = "sparse"
    boxes: str = "proposals/boxes.json"
    masks: str = "proposals/masks.json"
    adjacency: str = "adjacency.json"
    sfm_points: str = "sfm_points.ply"
    gt_points: str = "gt/points.ply"
    output: str = "run"


@dataclass
class AlignConfig:
    group_size: int = 40
    iters: int = 10
    min_samples: int = 10
    canny_sigma: float = 1.4
    canny_low: float = 0.1
    canny_high: float = 0.2
    dilate_px: int = 4
    conf_threshold: float = 1.5


@dataclass
class ScheduleConfig:
    total_iters: int = 30000
    # None: scaled from the 30k-iteration starts (7/30, 14/30, 7/30, 20/30 of the run)
    start_dn: int | None = None
    start_p: int | None = None
    start_rd: int | None = None
    start_rn: int | None = None
    lr_mu: float = 1.6e-4
    lr_mu_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rot: float = 1e-3
    lr_opacity: float = 5e-2
    lr_rgb: float = 2.5e-3
    ckpt_every: int = 0


@dataclass
class TrainStageConfig:
    disabled: list[str] = field(default_factory=list)
    threads: int = 1
    progress_every: int = 0
    alpha_max: float = 0.99
    cutoff_sigma: float = 3.0


@dataclass
class FuseConfig:
    voxel_size: float = 0.02
    trunc_m: float | None = None  # default 4 voxels
    pad_m: float = 0.1


@dataclass
class EvalConfig:
    samples_n: int = 200_000
    threshold_m: float = 0.05
    heatmaps: bool = False


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    lp3: Lp3Config = field(default_factory=Lp3Config)
    align: AlignConfig = field(default_factory=AlignConfig)
    init: InitConfig = field(default_factory=InitConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainStageConfig = field(default_factory=TrainStageConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    lambdas: tuple[float, float, float, float] = LAMBDAS
    seed: int = 0
    prompts: list[str] = field(default_factory=list)
    base_dir: str = "."  # directory the relative paths resolve against (not serialised)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def output(self) -> Path:
        return self.path("output")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["lambdas"] = list(self.lambdas)
        return d

    def digest(self, *sections: str) -> str:
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        sub = _SECTIONS.get((cls, k))
        kw[k] = _build(sub, v, f"{where}.{k}") if sub else v
    return cls(**kw)


_SECTIONS = {
    (RunConfig, "paths"): PathsConfig, (RunConfig, "lp3"): Lp3Config, (RunConfig, "align"): AlignConfig,
    (RunConfig, "init"): InitConfig, (RunConfig, "schedule"): ScheduleConfig,
    (RunConfig, "train"): TrainStageConfig, (RunConfig, "fuse"): FuseConfig, (RunConfig, "eval"): EvalConfig,
}


def config_from_dict(data: dict, base_dir: str | Path = ".") -> RunConfig:
    data = dict(data)
    data.pop("base_dir", None)
    cfg = _build(RunConfig, data, "config")
    cfg.lambdas = tuple(float(x) for x in cfg.lambdas)
    if len(cfg.lambdas) != 4 or any(x < 0 for x in cfg.lambdas):
        raise ConfigError(f"lambdas must be 4 non-negative numbers, got {cfg.lambdas}")
    cfg.base_dir = str(base_dir)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(data, path.parent)
