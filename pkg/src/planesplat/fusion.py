"""TSDF integration of depth maps and mesh extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes as _skimage_mc

from .geometry import CameraView
from .mesh import Mesh


@dataclass
class TsdfVolume:
    origin: np.ndarray  # world position of voxel (0, 0, 0)
    voxel_size: float
    tsdf: np.ndarray  # (nx, ny, nz) in [-1, 1]
    weight: np.ndarray
    color: np.ndarray | None = None  # (nx, ny, nz, 3)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.tsdf.shape

    @classmethod
    def create(cls, bounds_min, bounds_max, voxel_size: float, with_color: bool = True) -> "TsdfVolume":
        lo = np.asarray(bounds_min, dtype=np.float64)
        hi = np.asarray(bounds_max, dtype=np.float64)
        dims = tuple(int(x) for x in np.ceil((hi - lo) / voxel_size).astype(int) + 1)
        return cls(lo, float(voxel_size), np.ones(dims), np.zeros(dims),
                   np.zeros(dims + (3,)) if with_color else None)

    def voxel_centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.voxel_size


def tsdf_integrate(vol: TsdfVolume, depth: np.ndarray, color: np.ndarray | None, cam: CameraView,
                   trunc_m: float | None = None) -> TsdfVolume:
    """Running weighted average of clamp((D(proj(x)) - z_x) / trunc, -1, 1)."""
    trunc = trunc_m if trunc_m is not None else 4.0 * vol.voxel_size
    X = vol.voxel_centers()
    P = cam.world_to_camera(X)
    z = P[:, 2]
    front = z > 1e-6
    u = np.full(len(z), -1)
    v = np.full(len(z), -1)
    u[front] = np.round(cam.fx * P[front, 0] / z[front] + cam.cx).astype(int)
    v[front] = np.round(cam.fy * P[front, 1] / z[front] + cam.cy).astype(int)
    ok = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    idx = np.flatnonzero(ok)
    d = depth[v[idx], u[idx]]
    good = np.isfinite(d) & (d > 0)
    idx, d = idx[good], d[good]
    sdf = d - z[idx]
    upd = sdf > -trunc
    idx, sdf = idx[upd], sdf[upd]
    if len(idx) == 0:
        return vol
    new = np.clip(sdf / trunc, -1.0, 1.0)
    ts = vol.tsdf.reshape(-1)
    w = vol.weight.reshape(-1)
    ts[idx] = (ts[idx] * w[idx] + new) / (w[idx] + 1.0)
    if vol.color is not None and color is not None:
        col = vol.color.reshape(-1, 3)
        c = color[v[idx], u[idx]]
        col[idx] = (col[idx] * w[idx, None] + c) / (w[idx, None] + 1.0)
    w[idx] += 1.0
    return vol


def marching_cubes(vol: TsdfVolume, level: float = 0.0) -> Mesh:
    """Zero level set of the observed part of the volume (empty when no sign change)."""
    observed = vol.weight > 0
    # a cube is meshed only if all eight corners were observed. skimage looks the mask up at one
    # corner only (the cube's maximum corner), which triangulates the jump from the last
    # observed voxel behind a surface to the unobserved +1
    n0, n1, n2 = observed.shape
    inner = np.ones((max(n0 - 1, 0), max(n1 - 1, 0), max(n2 - 1, 0)), dtype=bool)
    for di, dj, dk in np.ndindex(2, 2, 2):
        inner &= observed[di:di + n0 - 1, dj:dj + n1 - 1, dk:dk + n2 - 1]
    cube = np.zeros_like(observed)
    cube[1:, 1:, 1:] = inner
    vals = vol.tsdf[observed]
    if vals.size == 0 or not (vals.min() < level < vals.max()):
        return Mesh.empty()
    try:
        verts, faces, normals, _ = _skimage_mc(vol.tsdf, level=level, spacing=(vol.voxel_size,) * 3,
                                               mask=cube)
    except (ValueError, RuntimeError):
        return Mesh.empty()
    if len(faces) == 0:
        return Mesh.empty()
    colors = None
    if vol.color is not None:
        ijk = np.clip(np.round(verts / vol.voxel_size).astype(int), 0, np.array(vol.dims) - 1)
        colors = vol.color[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
    return Mesh(verts + vol.origin, faces, colors, normals)
