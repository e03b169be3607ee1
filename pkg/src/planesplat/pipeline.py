"""Stage drivers. Stages talk only through files under the run directory and manifest.json.

Layout of a run directory::

    manifest.json
    align/  depth/<id>.pfm  normal/<id>.pfm  lt/<id>.png  conf/<id>.png  params.json
    lp3/    labels/<id>.png (+ .json sidecar)  boxes.json
    train/  scene.ply  init_scene.ply  init_report.json  loss.csv  [ckpt/]
    fuse/   mesh.ply  depth/<id>.pfm  color/<id>.png
    eval/   metrics.json  [heatmaps/<id>.png]

Every stage builds its outputs in a temporary sibling directory and renames it
into place only on success, so a failed stage leaves nothing behind.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import geometry as geo
from . import priors
from .config import RunConfig, config_from_dict, load_config
from .fusion import TsdfVolume, marching_cubes, tsdf_integrate
from .io import (FormatError, atomic_dir, read_json, read_mask_png, read_pfm, read_rgb_png, write_json,
                 write_mask_png, write_pfm, write_rgb_png)
from .lp3 import BoxProposal, MaskProposal, PlaneLabelMap, fuse_boxes_cross_view, refine_view
from .mesh import Mesh, PointCloud
from .metrics import MetricsReport, image_metrics, surface_metrics
from .render import RenderSettings, render
from .splat import GaussianScene, plane_guided_init, scene_from_points
from .train import Schedule, TrainConfig, ViewData, train

log = logging.getLogger(__name__)

STAGES = ("align", "lp3", "train", "fuse", "eval")
UPSTREAM = {"align": (), "lp3": ("align",), "train": ("align", "lp3"), "fuse": ("train",), "eval": ("fuse",)}
# config sections each stage depends on (besides its upstream stages)
SECTIONS = {"align": ("paths", "align"), "lp3": ("paths", "lp3"),
            "train": ("paths", "init", "schedule", "train", "lambdas", "seed"),
            "fuse": ("fuse", "train"), "eval": ("paths", "eval")}
MANIFEST_SCHEMA = 1


class ValidationError(ValueError):
    """Missing inputs, stage-order violations and similar user errors."""


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- manifest ----------------------------------------------------------------

def manifest_path(cfg: RunConfig) -> Path:
    return cfg.output / "manifest.json"


def load_manifest(cfg: RunConfig) -> dict:
    p = manifest_path(cfg)
    if p.exists():
        return read_json(p)
    return {"schema": MANIFEST_SCHEMA, "stages": {}}


def _save_manifest(cfg: RunConfig, man: dict) -> None:
    man["schema"] = MANIFEST_SCHEMA
    man["seed"] = cfg.seed
    man["lambdas"] = list(cfg.lambdas)
    man["prompts"] = list(cfg.prompts)
    man["base_dir"] = str(Path(cfg.base_dir).resolve())
    man["config"] = cfg.to_dict()
    cfg.output.mkdir(parents=True, exist_ok=True)
    tmp = manifest_path(cfg).with_suffix(".json.tmp")
    tmp.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    tmp.replace(manifest_path(cfg))


def stage_digest(cfg: RunConfig, stage: str, man: dict) -> str:
    d = cfg.to_dict()
    doc = {"sections": {k: d[k] for k in SECTIONS[stage]},
           "upstream": {u: man["stages"][u]["digest"] for u in UPSTREAM[stage] if u in man["stages"]}}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _outputs_intact(cfg: RunConfig, entry: dict) -> bool:
    for rel, h in entry.get("outputs", {}).items():
        p = cfg.output / rel
        if not p.exists() or sha256_file(p) != h:
            return False
    return True


def _require_upstream(cfg: RunConfig, stage: str, man: dict) -> None:
    for u in UPSTREAM[stage]:
        entry = man["stages"].get(u)
        if entry is None or not (cfg.output / u).is_dir():
            raise ValidationError(f"stage '{stage}' needs the output of stage '{u}' "
                                  f"({cfg.output / u} missing); run '{u}' first")


def _require_paths(cfg: RunConfig, names) -> None:
    missing = [str(cfg.path(n)) for n in names if not cfg.path(n).exists()]
    if missing:
        raise ValidationError("missing input paths:\n  " + "\n  ".join(missing))


def _commit(cfg: RunConfig, stage: str, tmp: Path, man: dict, digest: str, params: dict | None = None) -> dict:
    final = cfg.output / stage
    if final.exists():
        shutil.rmtree(final)
    tmp.replace(final)
    outputs = {str(p.relative_to(cfg.output)): sha256_file(p) for p in sorted(final.rglob("*")) if p.is_file()}
    man["stages"][stage] = {"digest": digest, "outputs": outputs, **({"params": params} if params else {})}
    # downstream results are stale once an upstream stage changes
    for s in STAGES[STAGES.index(stage) + 1:]:
        man["stages"].pop(s, None)
    _save_manifest(cfg, man)
    return man["stages"][stage]


def run_stage(cfg: RunConfig, stage: str, force: bool = False) -> bool:
    """Run one stage. Returns False when it was skipped as already complete."""
    man = load_manifest(cfg)
    _require_upstream(cfg, stage, man)
    digest = stage_digest(cfg, stage, man)
    entry = man["stages"].get(stage)
    if not force and entry is not None and entry.get("digest") == digest and _outputs_intact(cfg, entry):
        log.info("stage %s is up to date, skipped", stage)
        return False
    tmp = atomic_dir(cfg.output / stage)
    try:
        params = _RUNNERS[stage](cfg, tmp)
        _commit(cfg, stage, tmp, man, digest, params)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return True


def run_all(cfg: RunConfig, force: bool = False) -> None:
    for s in STAGES:
        run_stage(cfg, s, force)


# --- inputs ------------------------------------------------------------------

def load_inputs_cameras(cfg: RunConfig) -> list[geo.CameraView]:
    _require_paths(cfg, ["cameras"])
    try:
        return geo.load_cameras(cfg.path("cameras"))
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"{cfg.path('cameras')}: {e}") from e


def _per_view(dirpath: Path, cams, suffix: str) -> list[Path]:
    paths = [dirpath / f"{c.id}{suffix}" for c in cams]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ValidationError("missing input paths:\n  " + "\n  ".join(missing))
    return paths


def load_images(cfg: RunConfig, cams) -> list[np.ndarray]:
    imgs = [read_rgb_png(p) for p in _per_view(cfg.path("images"), cams, ".png")]
    for c, im in zip(cams, imgs):
        if im.shape[:2] != c.shape:
            raise FormatError(f"image {c.id} is {im.shape[1]}x{im.shape[0]}, camera says {c.width}x{c.height}")
    return imgs


def load_aligned(cfg: RunConfig, cams):
    a = cfg.output / "align"
    depth = [read_pfm(p) for p in _per_view(a / "depth", cams, ".pfm")]
    normal = [read_pfm(p) for p in _per_view(a / "normal", cams, ".pfm")]
    lt = [read_mask_png(p) for p in _per_view(a / "lt", cams, ".png")]
    conf = [read_mask_png(p) for p in _per_view(a / "conf", cams, ".png")]
    return depth, normal, lt, conf


def load_label_maps(cfg: RunConfig, cams) -> list[PlaneLabelMap]:
    return [PlaneLabelMap.load(p) for p in _per_view(cfg.output / "lp3" / "labels", cams, ".png")]


# --- stages ------------------------------------------------------------------

def _run_align(cfg: RunConfig, out: Path) -> dict:
    _require_paths(cfg, ["cameras", "images", "depth_prior", "confidence", "sparse"])
    cams = load_inputs_cameras(cfg)
    imgs = load_images(cfg, cams)
    dense = [priors.resize_depth(read_pfm(p), c.shape)
             for p, c in zip(_per_view(cfg.path("depth_prior"), cams, ".pfm"), cams)]
    conf = [priors.resize_confidence(read_pfm(p), c.shape)
            for p, c in zip(_per_view(cfg.path("confidence"), cams, ".pfm"), cams)]
    sparse = [priors.SparseDepth.load(p) for p in _per_view(cfg.path("sparse"), cams, ".json")]
    a = cfg.align
    for sub in ("depth", "normal", "lt", "conf"):
        (out / sub).mkdir()
    groups = []
    for gi, idx in enumerate(priors.view_groups(len(cams), a.group_size)):
        prm = priors.align_scale_shift([dense[i] for i in idx], [sparse[i] for i in idx], gi, a.iters,
                                       a.min_samples)
        log.info("align group %d: s=%.6f t=%.6f (%d samples)", gi, prm.s, prm.t, prm.n_samples)
        groups.append({**asdict(prm), "views": [cams[i].id for i in idx]})
        for i in idx:
            c = cams[i]
            d = prm.apply(dense[i])
            d = np.where(np.isfinite(d) & (d > 0), d, np.nan)
            write_pfm(out / "depth" / f"{c.id}.pfm", d)
            # normals from the float32 depth that downstream stages will read back
            d32 = d.astype(np.float32).astype(np.float64)
            write_pfm(out / "normal" / f"{c.id}.pfm", geo.normal_from_depth(d32, c, cfg.lp3.normal_offset))
            lt = priors.low_texture_mask(imgs[i], a.canny_sigma, a.canny_low, a.canny_high, a.dilate_px)
            write_mask_png(out / "lt" / f"{c.id}.png", lt)
            write_mask_png(out / "conf" / f"{c.id}.png", priors.confidence_mask(conf[i], a.conf_threshold))
    write_json(out / "params.json", {"groups": groups})
    return {"groups": [{k: g[k] for k in ("group_id", "s", "t", "n_samples")} for g in groups]}


def load_proposals(cfg: RunConfig, cams):
    _require_paths(cfg, ["boxes", "masks"])
    ids = {c.id for c in cams}
    shapes = {c.id: c.shape for c in cams}
    boxes = {c.id: [] for c in cams}
    masks = {c.id: [] for c in cams}
    try:
        bdoc = read_json(cfg.path("boxes"))
        mdoc = read_json(cfg.path("masks"))
        for i, d in enumerate(bdoc.get("boxes", [])):
            b = BoxProposal.from_json(d)
            if not b.id:
                b.id = f"{b.view_id}_b{i}"
            if b.view_id in ids:
                boxes[b.view_id].append(b)
        base = cfg.path("masks").parent
        for d in mdoc.get("masks", []):
            if d["view_id"] not in ids:
                continue
            m = read_mask_png(base / d["file"])
            if m.shape != shapes[d["view_id"]]:
                raise FormatError(f"mask {d['id']} has shape {m.shape}, expected {shapes[d['view_id']]}")
            if m.any():
                masks[d["view_id"]].append(MaskProposal(d["view_id"], d["label"], float(d.get("score", 1.0)),
                                                        m, d["id"]))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"malformed proposal file: {e}") from e
    return boxes, masks


def _run_lp3(cfg: RunConfig, out: Path) -> dict:
    cams = load_inputs_cameras(cfg)
    boxes, masks = load_proposals(cfg, cams)
    neighbors = {}
    if cfg.path("adjacency").exists():
        neighbors = read_json(cfg.path("adjacency")).get("neighbors", {})
    else:
        log.warning("no adjacency file at %s; cross-view fusion disabled", cfg.path("adjacency"))
    depth, _, _, _ = load_aligned(cfg, cams)
    cam_d = {c.id: c for c in cams}
    depth_d = {c.id: d for c, d in zip(cams, depth)}
    if not any(boxes.values()):
        log.warning("no box proposals; every label map will be empty")
    fused, transfers = fuse_boxes_cross_view(boxes, masks, depth_d, cam_d, neighbors, cfg.lp3)
    (out / "labels").mkdir()
    counts = {}
    for c in cams:
        lm = refine_view(c.id, fused[c.id], masks[c.id], transfers, depth_d, cam_d, cfg.lp3)
        lm.save(out / "labels" / f"{c.id}.png")
        counts[c.id] = lm.num_planes
    write_json(out / "boxes.json", {"boxes": [b.to_json() for c in cams for b in fused[c.id]]})
    return {"planes_per_view": counts}


def build_views(cfg: RunConfig, cams) -> list[ViewData]:
    imgs = load_images(cfg, cams)
    depth, normal, lt, conf = load_aligned(cfg, cams)
    lms = load_label_maps(cfg, cams)
    return [ViewData(c, imgs[i], depth[i], normal[i], lt[i], conf[i], lms[i].labels) for i, c in enumerate(cams)]


def make_schedule(cfg: RunConfig) -> Schedule:
    s = cfg.schedule
    starts = {k: getattr(s, k) for k in ("start_dn", "start_p", "start_rd", "start_rn") if getattr(s, k) is not None}
    sch = Schedule.scaled(s.total_iters, **starts)
    for k in ("lr_mu", "lr_mu_final", "lr_scale", "lr_rot", "lr_opacity", "lr_rgb", "ckpt_every"):
        setattr(sch, k, getattr(s, k))
    return sch


def render_settings(cfg: RunConfig) -> RenderSettings:
    return RenderSettings(alpha_max=cfg.train.alpha_max, cutoff_sigma=cfg.train.cutoff_sigma)


def initial_scene(cfg: RunConfig, cams, views: list[ViewData]) -> tuple[GaussianScene, list[dict]]:
    _require_paths(cfg, ["sfm_points"])
    pc = PointCloud.load(cfg.path("sfm_points"))
    cols = pc.colors if pc.colors is not None else np.full((len(pc.points), 3), 0.5)
    base = scene_from_points(pc.points, cols, cfg.init.init_opacity, cfg.init.knn, cfg.init.scale_mult)
    lms = load_label_maps(cfg, cams)
    return plane_guided_init(base, lms, [v.prior_depth for v in views], cams, [v.image for v in views], cfg.init)


def _run_train(cfg: RunConfig, out: Path) -> dict:
    cams = load_inputs_cameras(cfg)
    views = build_views(cfg, cams)
    scene, report = initial_scene(cfg, cams, views)
    scene.save_ply(out / "init_scene.ply")
    write_json(out / "init_report.json", {"regions": report, "n_gaussians": len(scene)})
    tcfg = TrainConfig(lambdas=cfg.lambdas, disabled=tuple(cfg.train.disabled), threads=cfg.train.threads,
                       normal_offset=cfg.lp3.normal_offset, render=render_settings(cfg))
    sch = make_schedule(cfg)
    log.info("training %d Gaussians for %d iterations", len(scene), sch.total_iters)
    final, _ = train(scene, views, sch, tcfg, seed=cfg.seed, log_path=out / "loss.csv",
                     ckpt_dir=out / "ckpt" if sch.ckpt_every else None, dump_dir=cfg.output / "debug",
                     progress_every=cfg.train.progress_every)
    final.save_ply(out / "scene.ply")
    return {"n_gaussians": len(final), "iterations": sch.total_iters,
            "starts": {"l_dn": sch.start_dn, "l_p": sch.start_p, "l_rd": sch.start_rd, "l_rn": sch.start_rn}}


def fusion_bounds(cfg: RunConfig, cams) -> tuple[np.ndarray, np.ndarray]:
    pts = PointCloud.load(cfg.path("sfm_points")).points
    lo = np.minimum(pts.min(0), np.min([c.center for c in cams], 0)) - cfg.fuse.pad_m
    hi = np.maximum(pts.max(0), np.max([c.center for c in cams], 0)) + cfg.fuse.pad_m
    return lo, hi


def _run_fuse(cfg: RunConfig, out: Path) -> dict:
    cams = load_inputs_cameras(cfg)
    scene = GaussianScene.load_ply(cfg.output / "train" / "scene.ply")
    lo, hi = fusion_bounds(cfg, cams)
    vol = TsdfVolume.create(lo, hi, cfg.fuse.voxel_size)
    (out / "depth").mkdir()
    (out / "color").mkdir()
    rs = render_settings(cfg)
    for c in cams:
        with torch.no_grad():
            r = render(scene, c, rs).numpy()
        write_pfm(out / "depth" / f"{c.id}.pfm", r["depth"])
        write_rgb_png(out / "color" / f"{c.id}.png", np.clip(r["color"], 0, 1))
        tsdf_integrate(vol, r["depth"], r["color"], c, cfg.fuse.trunc_m)
    mesh = marching_cubes(vol)
    if mesh.is_empty:
        log.warning("fused mesh is empty")
    mesh.save(out / "mesh.ply")
    return {"n_vertices": len(mesh.vertices), "n_triangles": len(mesh.triangles),
            "volume_dims": list(vol.dims)}


def _run_eval(cfg: RunConfig, out: Path) -> dict:
    cams = load_inputs_cameras(cfg)
    mesh = Mesh.load(cfg.output / "fuse" / "mesh.ply")
    report = None
    if cfg.path("gt_points").exists():
        gt = PointCloud.load(cfg.path("gt_points"))
        if mesh.is_empty:
            raise RuntimeError("fused mesh is empty; cannot evaluate surface metrics")
        report = surface_metrics(mesh, gt, cfg.eval.samples_n, cfg.seed, cfg.eval.threshold_m)
    else:
        log.warning("no ground truth at %s; surface metrics skipped", cfg.path("gt_points"))
        report = MetricsReport()
    imgs = load_images(cfg, cams)
    ps, ss = [], []
    if cfg.eval.heatmaps:
        (out / "heatmaps").mkdir()
    for c, im in zip(cams, imgs):
        r = read_rgb_png(cfg.output / "fuse" / "color" / f"{c.id}.png")
        p, s = image_metrics(r, im)
        ps.append(p)
        ss.append(s)
        if cfg.eval.heatmaps:
            err = np.abs(r - im).mean(-1)
            heat = np.stack([np.clip(err * 4, 0, 1), np.zeros_like(err), np.clip(1 - err * 4, 0, 1)], -1)
            write_rgb_png(out / "heatmaps" / f"{c.id}.png", heat)
    report.psnr_db = float(np.mean(ps))
    report.ssim = float(np.mean(ss))
    write_json(out / "metrics.json", report.to_json())
    return report.to_json()


def load_run_config(path: str | Path) -> RunConfig:
    """Load a run config, or the config recorded in a run's manifest.json (for replays)."""
    try:
        doc = read_json(path)
    except (OSError, ValueError):
        doc = None  # load_config reports the problem
    if isinstance(doc, dict) and "stages" in doc and "config" in doc:
        return config_from_dict(doc["config"], doc.get("base_dir", Path(path).parent))
    return load_config(path)


def dump_renders(cfg: RunConfig, channels, out_dir: str | Path) -> list[Path]:
    """Render the trained scene from every input view and write the chosen channels (PFM, color also PNG)."""
    scene = GaussianScene.load_ply(cfg.output / "train" / "scene.ply")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rs = render_settings(cfg)
    written = []
    for c in load_inputs_cameras(cfg):
        with torch.no_grad():
            r = render(scene, c, rs).numpy()
        for ch in channels:
            written.append(out_dir / f"{c.id}_{ch}.pfm")
            write_pfm(written[-1], r[ch])
            if ch == "color":
                written.append(out_dir / f"{c.id}_color.png")
                write_rgb_png(written[-1], np.clip(r[ch], 0, 1))
    return written


_RUNNERS = {"align": _run_align, "lp3": _run_lp3, "train": _run_train, "fuse": _run_fuse, "eval": _run_eval}
