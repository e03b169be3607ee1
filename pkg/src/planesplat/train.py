"""Training loop: view schedule, staged loss activation, Adam updates, logging."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .geometry import CameraView
from .io import write_pfm
from .render import RenderSettings, render
from .splat import GaussianScene

log = logging.getLogger(__name__)

BASE_ITERS = 30000
BASE_STARTS = {"l_dn": 7000, "l_p": 14000, "l_rd": 7000, "l_rn": 20000}


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class Schedule:
    total_iters: int = BASE_ITERS
    start_dn: int = 7000
    start_p: int = 14000
    start_rd: int = 7000
    start_rn: int = 20000
    lr_mu: float = 1.6e-4
    lr_mu_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rot: float = 1e-3
    lr_opacity: float = 5e-2
    lr_rgb: float = 2.5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-15
    ckpt_every: int = 0

    def __post_init__(self):
        for k in ("start_dn", "start_p", "start_rd", "start_rn"):
            if not 0 <= getattr(self, k) <= self.total_iters:
                raise ValueError(f"{k}={getattr(self, k)} outside [0, {self.total_iters}]")

    @classmethod
    def scaled(cls, total_iters: int, **kw) -> "Schedule":
        """Schedule with the stage starts at the same fractions of the run as the 30k default."""
        f = total_iters / BASE_ITERS
        starts = {f"start_{k[2:]}": int(round(v * f)) for k, v in BASE_STARTS.items()}
        starts.update(kw)
        return cls(total_iters=total_iters, **starts)

    def active(self, it: int) -> dict[str, bool]:
        return {"l_rgb": True, "l_s": True, "l_dn": it >= self.start_dn, "l_p": it >= self.start_p,
                "l_rd": it >= self.start_rd, "l_rn": it >= self.start_rn}

    def lr(self, name: str, it: int) -> float:
        if name == "mu":
            t = min(max(it / max(self.total_iters, 1), 0.0), 1.0)
            return math.exp((1 - t) * math.log(self.lr_mu) + t * math.log(self.lr_mu_final))
        return {"log_scale": self.lr_scale, "rot": self.lr_rot, "opacity_logit": self.lr_opacity,
                "rgb": self.lr_rgb}[name]


def select_view(iteration: int, num_views: int, seed: int = 0) -> int:
    """Epoch-wise permutation of the views, reseeded from (seed, epoch)."""
    if num_views == 1:
        return 0
    epoch, k = divmod(iteration, num_views)
    return int(np.random.default_rng([seed, epoch]).permutation(num_views)[k])


class Adam:
    def __init__(self, params: dict[str, torch.Tensor], betas=(0.9, 0.999), eps=1e-15):
        self.betas = betas
        self.eps = eps
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}
        self.t = 0

    @torch.no_grad()
    def step(self, params: dict[str, torch.Tensor], lrs: dict[str, float]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k].mul_(b1).add_(g, alpha=1 - b1)
            self.v[k].mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (self.v[k] / c2).sqrt_().add_(self.eps)
            p.addcdiv_(self.m[k], denom, value=-lrs[k] / c1)


@dataclass
class ViewData:
    cam: CameraView
    image: np.ndarray  # (H, W, 3)
    prior_depth: np.ndarray | None = None
    prior_normal: np.ndarray | None = None
    lt_mask: np.ndarray | None = None
    conf_mask: np.ndarray | None = None
    labels: np.ndarray | None = None


@dataclass
class TrainConfig:
    lambdas: tuple[float, float, float, float] = L.LAMBDAS
    disabled: tuple[str, ...] = ()  # loss terms switched off (ablations)
    plane_eps: float = 1e-6
    normal_offset: int = 1
    threads: int = 1
    render: RenderSettings = field(default_factory=RenderSettings)


def _as_tensor(a, dtype):
    return None if a is None else torch.as_tensor(np.asarray(a), dtype=dtype)


def compute_losses(scene: GaussianScene, view: ViewData, active: dict, cfg: TrainConfig):
    """Render one view and evaluate the active loss terms; returns (total, breakdown, render)."""
    out = render(scene, view.cam, cfg.render)
    dtype = scene.mu.dtype
    parts, counts = {}, {}
    parts["l_rgb"] = L.rgb_loss(out.color, _as_tensor(view.image, dtype))
    counts["l_rgb"] = view.cam.width * view.cam.height
    parts["l_s"] = L.flatten_loss(scene)
    counts["l_s"] = len(scene)
    need_sn = active.get("l_dn") or active.get("l_rn")
    surf_n = L.depth_normals(out.depth, view.cam, cfg.normal_offset) if need_sn else None
    if active.get("l_dn"):
        gs_n = out.unit_normal()
        gs_n = torch.where((out.acc >= cfg.render.acc_min)[..., None], gs_n, torch.full_like(gs_n, float("nan")))
        parts["l_dn"], counts["l_dn"] = L.dn_consistency_loss(gs_n, surf_n, view.lt_mask)
    if active.get("l_p") and view.labels is not None:
        parts["l_p"], _, counts["l_p"] = L.coplanarity_loss(out.depth, view.labels, view.cam, cfg.plane_eps)
    if active.get("l_rd") and view.prior_depth is not None:
        parts["l_rd"], counts["l_rd"] = L.prior_depth_loss(out.depth, view.prior_depth, view.lt_mask, view.conf_mask)
    if active.get("l_rn") and view.prior_normal is not None and view.labels is not None:
        parts["l_rn"], counts["l_rn"] = L.prior_normal_loss(surf_n, view.prior_normal, view.labels)
    total, bd = L.total_loss(parts, cfg.lambdas, active, counts)
    return total, bd, out


LOG_FIELDS = ["iteration", "view"] + list(L.TERMS) + ["total"] + [f"w_{k[2:]}" for k in L.TERMS] \
    + [f"n_{k[2:]}" for k in L.TERMS]


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _dump(out, view: ViewData, where: Path) -> None:
    where.mkdir(parents=True, exist_ok=True)
    for k, v in out.numpy().items():
        write_pfm(where / f"{view.cam.id}_{k}.pfm", v)


def train(scene: GaussianScene, views: list[ViewData], schedule: Schedule, cfg: TrainConfig | None = None,
          seed: int = 0, log_path: str | Path | None = None, ckpt_dir: str | Path | None = None,
          dump_dir: str | Path | None = None, progress_every: int = 0) -> tuple[GaussianScene, list[dict]]:
    cfg = cfg or TrainConfig()
    torch.set_num_threads(cfg.threads)
    scene = scene.detach().requires_grad_(True)
    params = scene.params()
    opt = Adam(params, schedule.betas, schedule.adam_eps)
    rows = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        for it in range(schedule.total_iters):
            vi = select_view(it, len(views), seed)
            view = views[vi]
            active = schedule.active(it)
            for k in cfg.disabled:
                active[k] = False
            for p in params.values():
                p.grad = None
            total, bd, out = compute_losses(scene, view, active, cfg)
            if not math.isfinite(bd.total):
                if dump_dir is not None:
                    _dump(out, view, Path(dump_dir))
                raise NonFiniteLossError(f"iteration {it}, view {view.cam.id}: non-finite loss {bd}")
            total.backward()
            opt.step(params, {k: schedule.lr(k, it) for k in params})
            with torch.no_grad():
                params["rot"].div_(params["rot"].norm(dim=1, keepdim=True))
            row = {"iteration": it, "view": view.cam.id, **bd.as_row()}
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])
            if schedule.ckpt_every and ckpt_dir is not None and (it + 1) % schedule.ckpt_every == 0:
                Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
                scene.save_ply(Path(ckpt_dir) / f"scene_{it + 1:06d}.ply")
            if progress_every and it % progress_every == 0:
                log.info("it %d view %s total %.5f rgb %.4f p %.5f rd %.6f", it, view.cam.id, bd.total,
                         bd.l_rgb, bd.l_p, bd.l_rd)
    finally:
        if fh is not None:
            fh.close()
    return scene.detach(), rows
