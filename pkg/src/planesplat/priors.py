"""Dense prior alignment to SfM scale and the masks gating the prior losses."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.feature import canny
from skimage.morphology import disk

from .io import read_json, write_json


class AlignmentFailedError(RuntimeError):
    pass


class DegenerateAlignmentError(AlignmentFailedError):
    pass


@dataclass
class SparseDepth:
    view_id: str
    uv: np.ndarray  # (N, 2) pixel coords
    depth: np.ndarray  # (N,) metres

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(-1)
        if np.any(self.depth <= 0):
            raise ValueError(f"view {self.view_id}: sparse depth must be positive")

    def save(self, path) -> None:
        write_json(path, {"view_id": self.view_id,
                          "samples": np.column_stack([self.uv, self.depth]).tolist()})

    @classmethod
    def load(cls, path) -> "SparseDepth":
        doc = read_json(path)
        s = np.asarray(doc["samples"], dtype=np.float64).reshape(-1, 3)
        return cls(str(doc["view_id"]), s[:, :2], s[:, 2])


@dataclass
class AlignmentParams:
    s: float
    t: float
    group_id: int = 0
    n_samples: int = 0
    mean_abs_residual: float = 0.0

    def apply(self, dense: np.ndarray) -> np.ndarray:
        return self.s * dense + self.t


def _pairs(dense_maps, sparse):
    xs, ys = [], []
    for dense, sp in zip(dense_maps, sparse):
        H, W = dense.shape
        u = np.round(sp.uv[:, 0]).astype(int)
        v = np.round(sp.uv[:, 1]).astype(int)
        inb = (u >= 0) & (u < W) & (v >= 0) & (v < H)
        d = np.full(len(u), np.nan)
        d[inb] = dense[v[inb], u[inb]]
        ok = np.isfinite(d)
        xs.append(d[ok])
        ys.append(sp.depth[ok])
    return np.concatenate(xs) if xs else np.zeros(0), np.concatenate(ys) if ys else np.zeros(0)


def align_scale_shift(dense_maps, sparse, group_id: int = 0, iters: int = 10,
                      min_samples: int = 10) -> AlignmentParams:
    """(s, t) minimising sum |sparse - (s * dense + t)| over a group of views.

    IRLS from the least-squares solution, weights 1 / max(|r|, 1e-6).
    """
    x, y = _pairs(dense_maps, sparse)
    if len(x) < min_samples:
        raise AlignmentFailedError(f"group {group_id}: {len(x)} usable samples, need {min_samples}")
    # sorting makes the sums independent of sample order
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    A = np.column_stack([x, np.ones_like(x)])
    sol = np.linalg.lstsq(A, y, rcond=None)[0]
    for _ in range(iters):
        r = y - A @ sol
        w = 1.0 / np.maximum(np.abs(r), 1e-6)
        Aw = A * w[:, None]
        sol = np.linalg.solve(A.T @ Aw, Aw.T @ y)
    s, t = float(sol[0]), float(sol[1])
    if not s > 0:
        raise DegenerateAlignmentError(f"group {group_id}: non-positive scale {s}")
    res = float(np.mean(np.abs(y - (s * x + t))))
    return AlignmentParams(s, t, group_id, len(x), res)


def view_groups(n_views: int, group_size: int = 40) -> list[list[int]]:
    return [list(range(i, min(i + group_size, n_views))) for i in range(0, n_views, group_size)]


def luma(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def low_texture_mask(rgb: np.ndarray, sigma: float = 1.4, low: float = 0.1, high: float = 0.2,
                     dilate_px: int = 4) -> np.ndarray:
    """True away from (dilated) Canny edges of the luma image."""
    edges = canny(luma(rgb), sigma=sigma, low_threshold=low, high_threshold=high, mode="nearest")
    if dilate_px > 0:
        edges = ndimage.binary_dilation(edges, structure=disk(dilate_px))
    return ~edges


def confidence_mask(conf: np.ndarray, threshold: float = 1.5) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.isfinite(conf) & (conf >= threshold)


def resize_depth(depth: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (H, W); identity when the shape already matches."""
    if depth.shape == tuple(shape):
        return depth
    zoom = (shape[0] / depth.shape[0], shape[1] / depth.shape[1])
    return ndimage.zoom(depth, zoom, order=1, mode="nearest", grid_mode=True)


def resize_confidence(conf: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if conf.shape == tuple(shape):
        return conf
    zoom = (shape[0] / conf.shape[0], shape[1] / conf.shape[1])
    return ndimage.zoom(conf, zoom, order=0, mode="nearest", grid_mode=True)


def load_sparse_dir(path: str | Path, view_ids) -> list[SparseDepth]:
    path = Path(path)
    return [SparseDepth.load(path / f"{v}.json") for v in view_ids]
