"""Gaussian scene representation: parameters, covariance, projection, normals.

The scene is stored as a structure of arrays (torch tensors, float64 by
default). A single Gaussian is just a scene with N = 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from scipy.spatial import cKDTree

from .geometry import CameraView
from .io import read_ply, write_ply

DTYPE = torch.float64
PARAM_NAMES = ("mu", "log_scale", "rot", "opacity_logit", "rgb")
NEAR = 0.01
LOW_PASS = 0.3
GUARD_BAND = 1.3  # frustum guard band, as a multiple of the half field of view


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class GaussianScene:
    mu: torch.Tensor  # (N, 3) world position
    log_scale: torch.Tensor  # (N, 3)
    rot: torch.Tensor  # (N, 4) quaternion (w, x, y, z)
    opacity_logit: torch.Tensor  # (N,)
    rgb: torch.Tensor  # (N, 3)

    def __len__(self) -> int:
        return self.mu.shape[0]

    def params(self) -> dict[str, torch.Tensor]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def detach(self) -> "GaussianScene":
        return GaussianScene(**{k: v.detach().clone() for k, v in self.params().items()})

    def requires_grad_(self, flag: bool = True) -> "GaussianScene":
        for v in self.params().values():
            v.requires_grad_(flag)
        return self

    def cat(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(**{k: torch.cat([getattr(self, k), getattr(other, k)]).detach()
                                for k in PARAM_NAMES})

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls.from_numpy(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                              np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_numpy(cls, mu, log_scale, rot, opacity_logit, rgb) -> "GaussianScene":
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE).clone()
        return cls(t(mu).reshape(-1, 3), t(log_scale).reshape(-1, 3), t(rot).reshape(-1, 4),
                   t(opacity_logit).reshape(-1), t(rgb).reshape(-1, 3))

    def save_ply(self, path) -> None:
        s = self.detach()
        cols = {}
        for i, k in enumerate("xyz"):
            cols[k] = s.mu[:, i].numpy()
        for i in range(3):
            cols[f"log_s{i + 1}"] = s.log_scale[:, i].numpy()
        for i, k in enumerate(("qw", "qx", "qy", "qz")):
            cols[k] = s.rot[:, i].numpy()
        cols["opacity_logit"] = s.opacity_logit.numpy()
        for i, k in enumerate("rgb"):
            cols[k] = s.rgb[:, i].numpy()
        write_ply(path, cols, comments=["gaussian scene checkpoint",
                                        "scale = exp(log_s*), rotation = unit quaternion (qw qx qy qz)",
                                        "opacity = sigmoid(opacity_logit), r g b in [0,1]"])

    @classmethod
    def load_ply(cls, path) -> "GaussianScene":
        v, _ = read_ply(path)
        g = lambda *ks: np.stack([v[k].astype(np.float64) for k in ks], axis=1)
        return cls.from_numpy(g("x", "y", "z"), g("log_s1", "log_s2", "log_s3"),
                              g("qw", "qx", "qy", "qz"), v["opacity_logit"].astype(np.float64),
                              g("r", "g", "b"))


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) wxyz quaternions (normalised here) -> (N, 3, 3)."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def quat_from_axis(n: np.ndarray) -> np.ndarray:
    """Unit quaternions rotating the local x axis onto unit vectors n (M, 3)."""
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    ex = np.array([1.0, 0.0, 0.0])
    w = 1.0 + n @ ex
    xyz = np.cross(ex, n)
    q = np.concatenate([w[:, None], xyz], axis=1)
    opposite = w < 1e-9
    q[opposite] = [0.0, 0.0, 0.0, 1.0]  # 180 deg about z
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def covariance(scene: GaussianScene) -> torch.Tensor:
    """Sigma = R S S^T R^T, (N, 3, 3)."""
    R = quat_to_rotmat(scene.rot)
    M = R * torch.exp(scene.log_scale)[:, None, :]
    return M @ M.transpose(1, 2)


class Projected2D(NamedTuple):
    mu2d: torch.Tensor  # (N, 2)
    cov2d: torch.Tensor  # (N, 2, 2), low-pass regularised
    depth_center: torch.Tensor  # (N,) camera-frame z of the centre
    culled: torch.Tensor  # (N,) bool, z <= near or centre outside the guard band
    p_cam: torch.Tensor  # (N, 3)


def camera_tensors(cam: CameraView, dtype=DTYPE) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    return (torch.as_tensor(cam.K, dtype=dtype), torch.as_tensor(cam.R, dtype=dtype),
            torch.as_tensor(cam.t, dtype=dtype))


def project(scene: GaussianScene, cam: CameraView, low_pass: float = LOW_PASS,
            near: float = NEAR, guard: float | None = GUARD_BAND) -> Projected2D:
    """EWA projection: full perspective for the centre, affine Jacobian for the covariance.

    Centres outside `guard` times the half field of view are culled: just past
    the near plane but off to the side, the affine Jacobian explodes and a
    single Gaussian would otherwise cover the whole image.
    """
    K, R, t = camera_tensors(cam, scene.mu.dtype)
    p = scene.mu @ R.T + t
    z = p[:, 2]
    culled = z <= near
    if guard is not None:
        with torch.no_grad():
            zc = z.clamp_min(near)
            tx, ty = guard * cam.width / (2 * cam.fx), guard * cam.height / (2 * cam.fy)
            culled = culled | ((p[:, 0] / zc).abs() > tx) | ((p[:, 1] / zc).abs() > ty)
    zs = torch.where(culled, torch.ones_like(z), z)
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    mu2d = torch.stack([fx * p[:, 0] / zs + cx, fy * p[:, 1] / zs + cy], dim=-1)
    zero = torch.zeros_like(z)
    J = torch.stack([
        fx / zs, zero, -fx * p[:, 0] / zs**2,
        zero, fy / zs, -fy * p[:, 1] / zs**2,
    ], dim=-1).reshape(-1, 2, 3)
    JW = J @ R
    cov2d = JW @ covariance(scene) @ JW.transpose(1, 2)
    cov2d = cov2d + low_pass * torch.eye(2, dtype=cov2d.dtype)
    return Projected2D(mu2d, cov2d, z, culled, p)


def gaussian_normal(scene: GaussianScene, cam: CameraView | None = None) -> torch.Tensor:
    """World-frame normal: rotation column of the smallest scale axis.

    Ties go to the lowest axis index. With a camera, the normal is flipped to
    face it.
    """
    R = quat_to_rotmat(scene.rot)
    axis = torch.argmin(scene.log_scale.detach(), dim=1)
    n = torch.gather(R, 2, axis[:, None, None].expand(-1, 3, 1)).squeeze(-1)
    if cam is not None:
        to_g = scene.mu.detach() - torch.as_tensor(cam.center, dtype=n.dtype)
        flip = (n.detach() * to_g).sum(-1) > 0
        n = torch.where(flip[:, None], -n, n)
    return n


# --- initialisation --------------------------------------------------------

@dataclass
class InitConfig:
    density_thresh: float = 0.01  # Gaussians per mask pixel
    samples_per_px: float = 0.01
    init_opacity: float = 0.1
    knn: int = 3
    # ratio of the normal-axis scale to the in-plane scale at creation
    flat_ratio: float = 1.0
    # a projected centre counts for a region only if it lies this close to the prior depth
    depth_tol: float = 0.1
    # multiplier on the nearest-neighbour scale of new Gaussians (1 = plain kNN distance)
    scale_mult: float = 1.0
    seed: int = 0


def knn_scale(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest other points (3DGS-style isotropic scale)."""
    n = len(points)
    if n < 2:
        return np.full(n, np.nan)
    k = min(k, n - 1)
    d, _ = cKDTree(points).query(points, k=k + 1)
    return np.maximum(d[:, 1:].mean(axis=1), 1e-7)


def scene_from_points(points: np.ndarray, colors: np.ndarray, init_opacity: float = 0.1,
                      knn: int = 3, scale_mult: float = 1.0) -> GaussianScene:
    """Isotropic, identity-rotation Gaussians on a point cloud (SfM initialisation)."""
    points = np.asarray(points, dtype=np.float64)
    s = knn_scale(points, knn) * scale_mult
    n = len(points)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianScene.from_numpy(points, np.log(np.repeat(s[:, None], 3, axis=1)), rot,
                                    np.full(n, logit(init_opacity)), np.clip(colors, 0, 1))


def plane_guided_init(existing: GaussianScene, label_maps, prior_depths, cams: list[CameraView],
                      images, cfg: InitConfig) -> tuple[GaussianScene, list[dict]]:
    """Supplement sparse plane regions with Gaussians sampled on the prior depth.

    label_maps: per-view PlaneLabelMap; prior_depths: aligned prior depth per
    view; images: per-view RGB (H, W, 3). Views are processed in order and
    newly added Gaussians count towards later views. Returns the augmented
    scene (existing Gaussians first, untouched) and a per-region report.
    """
    rng = np.random.default_rng(cfg.seed)
    centers = existing.mu.detach().numpy().copy()
    added = []
    report = []
    for vi, cam in enumerate(cams):
        lm = label_maps[vi]
        labels = lm.labels
        depth = prior_depths[vi]
        P = cam.world_to_camera(centers)
        uv, z = cam.project(P)
        with np.errstate(invalid="ignore"):
            ok = z > NEAR
        ui = np.full(len(z), -1)
        vi_ = np.full(len(z), -1)
        ui[ok] = np.round(uv[ok, 0]).astype(int)
        vi_[ok] = np.round(uv[ok, 1]).astype(int)
        inb = ok & (ui >= 0) & (ui < cam.width) & (vi_ >= 0) & (vi_ < cam.height)
        hit_label = np.zeros(len(z), dtype=np.int64)
        d_at = depth[vi_[inb], ui[inb]]
        near_surface = np.abs(z[inb] - d_at) <= cfg.depth_tol
        hit_label[np.flatnonzero(inb)[near_surface]] = labels[vi_[inb], ui[inb]][near_surface]
        counts = np.bincount(hit_label, minlength=labels.max(initial=0) + 1)
        for lab in range(1, labels.max(initial=0) + 1):
            mask = labels == lab
            area = int(mask.sum())
            valid = mask & np.isfinite(depth) & (depth > 0)
            entry = {"view": cam.id, "label": lab, "area": area, "count": int(counts[lab]), "added": 0}
            report.append(entry)
            if area == 0 or not valid.any():
                continue
            if counts[lab] / area >= cfg.density_thresh:
                continue
            deficit = cfg.density_thresh * area - counts[lab]
            n_add = min(int(round(cfg.samples_per_px * deficit)), int(valid.sum()))
            if n_add <= 0:
                continue
            vv, uu = np.nonzero(valid)
            pick = np.sort(rng.choice(len(vv), size=n_add, replace=False))
            vv, uu = vv[pick], uu[pick]
            pts_cam = depth[vv, uu][:, None] * (np.stack([uu, vv, np.ones_like(uu)], 1) @ cam.Kinv.T)
            pts = cam.camera_to_world(pts_cam)
            if n_add > cfg.knn:
                s = knn_scale(pts, cfg.knn)
            else:
                # pixel footprint spread over the samples
                s = depth[vv, uu] / cam.fx * np.sqrt(area / n_add)
            n_cam = lm.meta[lab]["normal"] if lm.meta and lab in lm.meta else [0.0, 0.0, -1.0]
            n_world = cam.R.T @ np.asarray(n_cam, dtype=np.float64)
            log_s = np.log(np.repeat(s[:, None] * cfg.scale_mult, 3, axis=1))
            log_s[:, 0] += np.log(cfg.flat_ratio)
            rot = np.repeat(quat_from_axis(n_world), n_add, axis=0)
            rgb = images[vi][vv, uu] if images is not None else np.full((n_add, 3), 0.5)
            new = GaussianScene.from_numpy(pts, log_s, rot, np.full(n_add, logit(cfg.init_opacity)), rgb)
            added.append(new)
            centers = np.concatenate([centers, pts])
            entry["added"] = n_add
    scene = existing.detach()
    for g in added:
        scene = scene.cat(g)
    return scene, report
