"""Pinhole camera math and depth-derived normal / plane-distance maps.

Rasters are numpy arrays indexed ``[v, u]`` (row, column). Pixel ``(u, v)``
refers to the pixel centre, so the principal point ``(cx, cy)`` back-projects
onto the optical axis. Missing values are NaN everywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np


class BoundsError(IndexError):
    """Pixel outside the image."""


class InvalidSampleError(ValueError):
    """Depth sample missing (NaN) or non-positive."""


@dataclass(frozen=True)
class CameraView:
    K: np.ndarray
    R: np.ndarray  # world -> camera
    t: np.ndarray  # world -> camera
    width: int
    height: int
    id: str = "0"
    _Kinv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError(f"view {self.id}: R is not a proper rotation")
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if not (fx > 0 and fy > 0):
            raise ValueError(f"view {self.id}: focal lengths must be positive")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ValueError(f"view {self.id}: principal point outside image")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "_Kinv", np.linalg.inv(K))

    @property
    def Kinv(self) -> np.ndarray:
        return self._Kinv

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def world_to_camera(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.R.T + self.t

    def camera_to_world(self, P: np.ndarray) -> np.ndarray:
        return (np.asarray(P) - self.t) @ self.R

    def project(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Camera-frame points (..., 3) -> pixel coords (..., 2) and z."""
        P = np.asarray(P, dtype=np.float64)
        z = P[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.K[0, 0] * P[..., 0] / z + self.K[0, 2]
            v = self.K[1, 1] * P[..., 1] / z + self.K[1, 2]
        return np.stack([u, v], axis=-1), z

    def rays(self) -> np.ndarray:
        """K^-1 [u, v, 1]^T for every pixel, shape (H, W, 3)."""
        vv, uu = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        return pix @ self.Kinv.T

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "width": int(self.width),
            "height": int(self.height),
            "K": self.K.reshape(-1).tolist(),
            "R": self.R.reshape(-1).tolist(),
            "t": self.t.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraView":
        return cls(
            K=np.array(d["K"], dtype=np.float64).reshape(3, 3),
            R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
            t=np.array(d["t"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
            id=str(d["id"]),
        )


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World->camera (R, t) for a camera at `eye` looking at `target`.

    Camera axes follow the usual vision convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


def load_cameras(path: str | Path) -> list[CameraView]:
    doc = json.loads(Path(path).read_text())
    return [CameraView.from_json(v) for v in doc["views"]]


def save_cameras(path: str | Path, cams: list[CameraView]) -> None:
    Path(path).write_text(json.dumps({"views": [c.to_json() for c in cams]}, indent=1))


def back_project(depth: np.ndarray, cam: CameraView, pixel: tuple[int, int]) -> np.ndarray:
    """Camera-frame 3D point of integer pixel (u, v): D(p) * K^-1 [u, v, 1]."""
    u, v = pixel
    h, w = depth.shape
    if not (0 <= u < w and 0 <= v < h):
        raise BoundsError(f"pixel {pixel} outside {w}x{h} image")
    d = depth[v, u]
    if not np.isfinite(d) or d <= 0:
        raise InvalidSampleError(f"invalid depth {d} at pixel {pixel}")
    return d * (cam.Kinv @ np.array([u, v, 1.0]))


def back_project_map(depth: np.ndarray, cam: CameraView) -> np.ndarray:
    """All pixels at once; (H, W, 3), NaN where depth is invalid."""
    d = np.where(np.isfinite(depth) & (depth > 0), depth, np.nan)
    return d[..., None] * cam.rays()


def back_project_pixels(depth_values: np.ndarray, uv: np.ndarray, cam: CameraView) -> np.ndarray:
    """Back-project arbitrary (possibly fractional) pixels with given depths."""
    uv = np.asarray(uv, dtype=np.float64)
    pix = np.concatenate([uv, np.ones((len(uv), 1))], axis=1)
    return np.asarray(depth_values, dtype=np.float64)[:, None] * (pix @ cam.Kinv.T)


class Reprojection(NamedTuple):
    P: np.ndarray  # target camera frame
    uv: np.ndarray
    z: np.ndarray
    behind: np.ndarray  # z <= 0, caller drops these


def relative_pose(source: CameraView, target: CameraView) -> tuple[np.ndarray, np.ndarray]:
    R_rel = target.R @ source.R.T
    return R_rel, target.t - R_rel @ source.t


def transform_point(P_s: np.ndarray, source: CameraView, target: CameraView) -> Reprojection:
    """Move source-camera points (..., 3) into the target camera and project them."""
    R_rel, t_rel = relative_pose(source, target)
    P_t = np.asarray(P_s, dtype=np.float64) @ R_rel.T + t_rel
    uv, z = target.project(P_t)
    behind = z <= 0
    uv = np.where(behind[..., None], np.nan, uv)
    return Reprojection(P_t, uv, z, behind)


def normal_from_depth(depth: np.ndarray, cam: CameraView, h: int = 1) -> np.ndarray:
    """Local-plane normals from the left/right/top/bottom neighbours at offset h.

    n = (P_right - P_left) x (P_bottom - P_top), normalised and oriented so that
    it faces the camera (n . P < 0). Pixels within h of the border, with any
    invalid neighbour, or with a degenerate cross product are NaN.
    """
    H, W = depth.shape
    out = np.full((H, W, 3), np.nan)
    if H <= 2 * h or W <= 2 * h:
        return out
    P = back_project_map(depth, cam)
    c = P[h:-h, h:-h]
    p0 = P[h:-h, : -2 * h]
    p1 = P[h:-h, 2 * h :]
    p2 = P[: -2 * h, h:-h]
    p3 = P[2 * h :, h:-h]
    n = np.cross(p1 - p0, p3 - p2)
    norm = np.linalg.norm(n, axis=-1)
    ok = np.isfinite(norm) & (norm >= 1e-12) & np.isfinite(c).all(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[..., None]
    flip = np.sum(n * c, axis=-1) > 0
    n = np.where(flip[..., None], -n, n)
    n[~ok] = np.nan
    out[h:-h, h:-h] = n
    return out


def plane_distance_map(depth: np.ndarray, normals: np.ndarray, cam: CameraView) -> np.ndarray:
    """delta(p) = P(p) . N(p); negative under the camera-facing normal convention."""
    return np.sum(back_project_map(depth, cam) * normals, axis=-1)
