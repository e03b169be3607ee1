"""Synthetic scenes with exact ground truth, written in the pipeline's input layout.

Scenes are unions of rectangles and spheres, ray-cast exactly. Besides images
and cameras, a fixture carries everything the pipeline would normally get from
foundation models (dense relative depth, confidence, detector boxes and masks)
plus SfM-style sparse depth and the ground truth used by the tests.
"""
from __future__ import annotations

import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .io import atomic_dir, replace_dir, write_json, write_label_png, write_mask_png, write_pfm, write_rgb_png
from .mesh import Mesh, PointCloud

log = logging.getLogger(__name__)

KINDS = ("box_room", "two_walls", "sphere_in_room")


@dataclass
class Rect:
    origin: np.ndarray
    a: np.ndarray  # full edge vectors
    b: np.ndarray
    color: tuple[float, float, float]
    name: str = ""
    label: str = "wall"

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.a, self.b)
        return n / np.linalg.norm(n)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: tuple[float, float, float]
    name: str = "sphere"
    label: str = "object"


@dataclass
class FixtureParams:
    n_views: int = 20
    width: int = 64
    height: int = 48
    focal: float = 32.0
    prior_noise_m: float = 0.0
    noise_corr_px: float = 8.0
    affine: tuple[float, float] | None = None  # (s, t): stored dense prior is (depth - t) / s
    sparse_per_view: int = 150
    outlier_frac: float = 0.0
    texture_amp: float = 0.04
    parallel_step: bool = False  # two_walls: add a recessed wall parallel to the first
    missing_every: int = 5  # box_room: every k-th view lacks its wall mask (0 disables)
    sparse_noise_m: float = 0.0


def _rect(o, a, b, color, name, label):
    return Rect(np.asarray(o, float), np.asarray(a, float), np.asarray(b, float), color, name, label)


def box_room_scene(w=2.0, d=2.0, h=1.5) -> list:
    x0, y0 = -w / 2, -d / 2
    return [
        _rect((x0, y0, 0), (w, 0, 0), (0, d, 0), (0.55, 0.45, 0.35), "floor", "floor"),
        _rect((x0, y0, h), (0, d, 0), (w, 0, 0), (0.85, 0.85, 0.8), "ceiling", "ceiling"),
        _rect((x0, y0, 0), (0, 0, h), (w, 0, 0), (0.75, 0.6, 0.5), "wall_s", "wall"),
        _rect((x0, -y0, 0), (w, 0, 0), (0, 0, h), (0.5, 0.65, 0.75), "wall_n", "wall"),
        _rect((x0, y0, 0), (0, d, 0), (0, 0, h), (0.7, 0.75, 0.5), "wall_w", "wall"),
        _rect((-x0, y0, 0), (0, 0, h), (0, d, 0), (0.6, 0.5, 0.7), "wall_e", "wall"),
    ]


RECESS = 0.15


def two_walls_scene(parallel_step: bool = False) -> list:
    prims = []
    if parallel_step:
        # wall_c sits 15 cm behind wall_a and continues behind it, so the two parallel walls meet
        # in the image at an occlusion edge
        prims.append(_rect((2.0, -2.0, 0), (0, 1.5, 0), (0, 0, 2.0), (0.75, 0.6, 0.5), "wall_a", "wall"))
        prims.append(_rect((2.0 + RECESS, -0.8, 0), (0, 1.3, 0), (0, 0, 2.0), (0.72, 0.62, 0.52), "wall_c", "wall"))
        prims.append(_rect((0.5, 0.5, 0), (1.5 + RECESS, 0, 0), (0, 0, 2.0), (0.5, 0.65, 0.75), "wall_b", "wall"))
    else:
        prims.append(_rect((2.0, -2.0, 0), (0, 2.5, 0), (0, 0, 2.0), (0.75, 0.6, 0.5), "wall_a", "wall"))
        prims.append(_rect((0.5, 0.5, 0), (1.5, 0, 0), (0, 0, 2.0), (0.5, 0.65, 0.75), "wall_b", "wall"))
    return prims


def sphere_in_room_scene() -> list:
    return box_room_scene() + [Sphere(np.array([0.0, 0.0, 0.6]), 0.3, (0.8, 0.3, 0.3))]


def box_room_cameras(p: FixtureParams) -> list[geo.CameraView]:
    K = geo.intrinsics(p.focal, p.focal, (p.width - 1) / 2, (p.height - 1) / 2)
    cams = []
    for i in range(p.n_views):
        th = 2 * np.pi * i / p.n_views
        eye = np.array([0.3 * np.cos(th), 0.3 * np.sin(th), 0.75 + (0.1 if i % 2 else -0.1)])
        yaw = th + 0.3 * np.sin(3 * th)
        pitch = np.deg2rad(25.0) * (1 if i % 2 else -1)
        fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        R, t = geo.look_at(eye, eye + fwd)
        cams.append(geo.CameraView(K, R, t, p.width, p.height, f"{i:03d}"))
    return cams


def two_walls_cameras(p: FixtureParams) -> list[geo.CameraView]:
    K = geo.intrinsics(p.focal, p.focal, (p.width - 1) / 2, (p.height - 1) / 2)
    cams = []
    n = p.n_views
    for i in range(n):
        s = i / max(n - 1, 1) - 0.5
        eye = np.array([0.0 + 0.2 * s, -0.6 + 0.6 * s, 1.0 + 0.1 * np.sin(3 * i)])
        R, t = geo.look_at(eye, np.array([2.0, 0.2, 1.0]))
        cams.append(geo.CameraView(K, R, t, p.width, p.height, f"{i:03d}"))
    return cams


def sphere_cameras(p: FixtureParams) -> list[geo.CameraView]:
    K = geo.intrinsics(p.focal, p.focal, (p.width - 1) / 2, (p.height - 1) / 2)
    cams = []
    for i in range(p.n_views):
        th = 2 * np.pi * i / p.n_views
        eye = np.array([0.85 * np.cos(th), 0.85 * np.sin(th), 0.9 + (0.1 if i % 2 else -0.1)])
        R, t = geo.look_at(eye, np.array([0.0, 0.0, 0.6]))
        cams.append(geo.CameraView(K, R, t, p.width, p.height, f"{i:03d}"))
    return cams


@dataclass
class RayCast:
    depth: np.ndarray  # z-depth, NaN on miss
    normal: np.ndarray  # camera frame, facing the camera
    prim: np.ndarray  # primitive index, -1 on miss
    points: np.ndarray  # world


def ray_cast(prims: list, cam: geo.CameraView) -> RayCast:
    H, W = cam.height, cam.width
    d = cam.rays().reshape(-1, 3) @ cam.R  # world directions with unit camera z
    C = cam.center
    best = np.full(H * W, np.inf)
    idx = np.full(H * W, -1)
    nrm = np.full((H * W, 3), np.nan)
    for k, pr in enumerate(prims):
        if isinstance(pr, Rect):
            n = pr.normal
            den = d @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((pr.origin - C) @ n) / den
            X = C + t[:, None] * d
            rel = X - pr.origin
            al = rel @ pr.a / (pr.a @ pr.a)
            be = rel @ pr.b / (pr.b @ pr.b)
            hit = (np.abs(den) > 1e-12) & (t > 1e-6) & (al >= 0) & (al <= 1) & (be >= 0) & (be <= 1)
            nk = np.broadcast_to(n, (H * W, 3))
        else:
            oc = C - pr.center
            bq = d @ oc
            aq = np.sum(d * d, axis=1)
            cq = oc @ oc - pr.radius**2
            disc = bq**2 - aq * cq
            with np.errstate(invalid="ignore"):
                sq = np.sqrt(disc)
            t = (-bq - sq) / aq
            hit = (disc > 0) & (t > 1e-6)
            X = C + t[:, None] * d
            nk = (X - pr.center) / pr.radius
        upd = hit & (t < best)
        best[upd] = t[upd]
        idx[upd] = k
        nrm[upd] = nk[upd]
    depth = np.where(idx >= 0, best, np.nan).reshape(H, W)
    n_cam = nrm @ cam.R.T
    P = (cam.rays().reshape(-1, 3) * best[:, None])
    flip = np.sum(n_cam * P, axis=1) > 0
    n_cam[flip] *= -1
    pts = C + best[:, None] * d
    pts[idx < 0] = np.nan
    return RayCast(depth, n_cam.reshape(H, W, 3), idx.reshape(H, W), pts.reshape(H, W, 3))


def _texture(X: np.ndarray, amp: float) -> np.ndarray:
    s = np.sin(2 * np.pi * 1.7 * X[..., 0] + 1.1) * np.sin(2 * np.pi * 1.3 * X[..., 1] + 0.4)
    return amp * s * np.cos(2 * np.pi * 1.1 * X[..., 2])


def shade(prims: list, rc: RayCast, amp: float) -> np.ndarray:
    H, W = rc.depth.shape
    img = np.zeros((H, W, 3))
    for k, pr in enumerate(prims):
        m = rc.prim == k
        if not m.any():
            continue
        base = np.asarray(pr.color)
        if isinstance(pr, Sphere):
            lam = 0.6 + 0.4 * np.abs(rc.normal[m][:, 2])
            img[m] = base * lam[:, None]
        else:
            img[m] = base + _texture(rc.points[m], amp)[:, None]
    return np.clip(img, 0.0, 1.0)


def smooth_noise(shape, sigma_m: float, corr_px: float, rng: np.random.Generator) -> np.ndarray:
    """Correlated Gaussian noise with unit-normalised std times sigma_m."""
    if sigma_m <= 0:
        return np.zeros(shape)
    n = ndimage.gaussian_filter(rng.standard_normal(shape), corr_px, mode="reflect")
    return n / max(n.std(), 1e-12) * sigma_m


def scene_mesh(prims: list) -> Mesh:
    V, F = [], []
    for pr in prims:
        base = sum(len(v) for v in V)
        if isinstance(pr, Rect):
            o, a, b = pr.origin, pr.a, pr.b
            V.append(np.stack([o, o + a, o + a + b, o + b]))
            F.append(np.array([[0, 1, 2], [0, 2, 3]]) + base)
        else:
            nu, nv = 48, 24
            th = np.linspace(0, np.pi, nv + 1)
            ph = np.linspace(0, 2 * np.pi, nu, endpoint=False)
            T, P = np.meshgrid(th, ph, indexing="ij")
            pts = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
            V.append(pr.center + pr.radius * pts)
            tri = []
            for i in range(nv):
                for j in range(nu):
                    a0, a1 = i * nu + j, i * nu + (j + 1) % nu
                    b0, b1 = a0 + nu, a1 + nu
                    tri += [[a0, b0, b1], [a0, b1, a1]]
            F.append(np.array(tri) + base)
    return Mesh(np.concatenate(V), np.concatenate(F))


def _scene_and_cams(kind: str, p: FixtureParams):
    if kind == "box_room":
        return box_room_scene(), box_room_cameras(p)
    if kind == "two_walls":
        return two_walls_scene(p.parallel_step), two_walls_cameras(p)
    if kind == "sphere_in_room":
        return sphere_in_room_scene(), sphere_cameras(p)
    raise ValueError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")


def _proposals(kind, prims, rc: RayCast, cam, p: FixtureParams, view_idx: int):
    """Imperfect segmenter output: merged same-class masks, eroded by one pixel."""
    masks = []
    groups: dict[str, np.ndarray] = {}
    for k, pr in enumerate(prims):
        m = rc.prim == k
        if m.any():
            groups[pr.label] = groups.get(pr.label, np.zeros_like(m)) | m
    for label in sorted(groups):
        if kind in ("box_room", "sphere_in_room") and label == "wall" and p.missing_every \
                and view_idx % p.missing_every == p.missing_every // 2:
            continue
        m = ndimage.binary_erosion(groups[label], iterations=1)
        if m.sum() < 8:
            continue
        masks.append((label, m))
    return masks


def default_run_config(kind: str) -> dict:
    """Run config (JSON) paired with a fixture; paths are relative to the fixture directory."""
    return {
        "paths": {"output": "run"},
        "prompts": ["wall", "floor", "ceiling", "table", "door", "window"],
        "seed": 0,
        # dense enough for ~20k Gaussians on the 20-view box room
        "init": {"density_thresh": 0.8, "samples_per_px": 1.0, "scale_mult": 0.5},
        "schedule": {"total_iters": 3000},
        "fuse": {"voxel_size": 0.02},
    }


def make_fixture(out_dir: str | Path, kind: str = "box_room", params: FixtureParams | None = None,
                 seed: int = 0, force: bool = False) -> Path:
    p = params or FixtureParams()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use force)")
    prims, cams = _scene_and_cams(kind, p)
    rng = np.random.default_rng(seed)
    tmp = atomic_dir(out)
    try:
        for sub in ("images", "depth_prior", "confidence", "sparse", "proposals/masks", "gt/depth", "gt/normal",
                    "gt/plane_id"):
            (tmp / sub).mkdir(parents=True, exist_ok=True)
        geo.save_cameras(tmp / "cameras.json", cams)
        boxes, mask_index = [], []
        gt_pts, gt_nrm, sfm_pts, sfm_col = [], [], [], []
        for i, cam in enumerate(cams):
            rc = ray_cast(prims, cam)
            img = shade(prims, rc, p.texture_amp)
            write_rgb_png(tmp / "images" / f"{cam.id}.png", img)
            write_pfm(tmp / "gt" / "depth" / f"{cam.id}.pfm", rc.depth)
            write_pfm(tmp / "gt" / "normal" / f"{cam.id}.pfm", rc.normal)
            plane_id = np.where(rc.prim >= 0, rc.prim + 1, 0)
            for k, pr in enumerate(prims):
                if isinstance(pr, Sphere):
                    plane_id[rc.prim == k] = 0
            write_label_png(tmp / "gt" / "plane_id" / f"{cam.id}.png", plane_id)

            noisy = rc.depth + smooth_noise(rc.depth.shape, p.prior_noise_m, p.noise_corr_px, rng)
            dense = noisy if p.affine is None else (noisy - p.affine[1]) / p.affine[0]
            write_pfm(tmp / "depth_prior" / f"{cam.id}.pfm", dense)
            conf = np.full(rc.depth.shape, 3.0)
            blob = ndimage.gaussian_filter(rng.standard_normal(rc.depth.shape), 4.0)
            conf[blob > np.quantile(blob, 0.95)] = 1.0
            conf[~np.isfinite(rc.depth)] = 0.0
            write_pfm(tmp / "confidence" / f"{cam.id}.pfm", conf)

            # SfM-like sparse depth at pixel centres, optionally with gross outliers
            vs, us = np.nonzero(np.isfinite(rc.depth))
            pick = np.sort(rng.choice(len(us), size=min(p.sparse_per_view, len(us)), replace=False))
            u, v = us[pick], vs[pick]
            d = rc.depth[v, u].astype(np.float32).astype(np.float64)
            if p.sparse_noise_m > 0:
                d = d + rng.normal(0, p.sparse_noise_m, len(d))
            n_out = int(round(p.outlier_frac * len(d)))
            if n_out:
                bad = rng.choice(len(d), size=n_out, replace=False)
                d[bad] = d[bad] * rng.uniform(1.3, 2.0, n_out)
            write_json(tmp / "sparse" / f"{cam.id}.json",
                       {"view_id": cam.id, "samples": np.column_stack([u, v, d]).tolist()})
            inl = np.ones(len(d), bool)
            if n_out:
                inl[bad] = False
            P = geo.back_project_pixels(d[inl], np.column_stack([u, v])[inl].astype(float), cam)
            sfm_pts.append(cam.camera_to_world(P))
            sfm_col.append(img[v[inl], u[inl]])

            ok = np.isfinite(rc.depth)
            gt_pts.append(rc.points[ok])
            gt_nrm.append(rc.normal[ok] @ cam.R)

            for j, (label, m) in enumerate(_proposals(kind, prims, rc, cam, p, i)):
                mid = f"{cam.id}_m{j}"
                write_mask_png(tmp / "proposals" / "masks" / f"{mid}.png", m)
                mask_index.append({"id": mid, "view_id": cam.id, "label": label, "score": 0.9,
                                   "file": f"masks/{mid}.png"})
                vv, uu = np.nonzero(m)
                boxes.append({"view_id": cam.id, "label": label, "score": 0.9,
                              "box": [int(uu.min()), int(vv.min()), int(uu.max()) + 1, int(vv.max()) + 1],
                              "id": f"{cam.id}_b{j}", "mask_id": mid, "source": "detector"})
        write_json(tmp / "proposals" / "boxes.json", {"boxes": boxes})
        write_json(tmp / "proposals" / "masks.json", {"masks": mask_index})
        n = len(cams)
        k = 2 if n > 2 else 1
        write_json(tmp / "adjacency.json", {"neighbors": {
            c.id: [cams[(i + o) % n].id for o in range(-k, k + 1) if o != 0 and (i + o) % n != i]
            for i, c in enumerate(cams)}})
        PointCloud(np.concatenate(sfm_pts), colors=np.concatenate(sfm_col)).save(tmp / "sfm_points.ply")
        PointCloud(np.concatenate(gt_pts), np.concatenate(gt_nrm)).save(tmp / "gt" / "points.ply")
        scene_mesh(prims).save(tmp / "gt" / "mesh.ply")
        pd = asdict(p)
        write_json(tmp / "fixture.json", {"kind": kind, "seed": seed, "params": pd,
                                          "primitives": [pr.name for pr in prims]})
        write_json(tmp / "config.json", default_run_config(kind))
        replace_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out
