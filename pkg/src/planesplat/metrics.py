"""Surface (Acc / Comp / CD / F1 / NC) and image (PSNR / SSIM) metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .losses import ssim as _ssim
from .mesh import Mesh, PointCloud

PSNR_CAP = 99.0


@dataclass
class MetricsReport:
    acc_cm: float = float("nan")
    comp_cm: float = float("nan")
    cd_cm: float = float("nan")
    f1_pct: float = float("nan")
    nc_pct: float = float("nan")
    psnr_db: float = float("nan")
    ssim: float = float("nan")
    precision_pct: float = float("nan")
    recall_pct: float = float("nan")

    def to_json(self) -> dict:
        return {k: (None if v != v else v) for k, v in asdict(self).items()}


def _samples(x, n, seed):
    if isinstance(x, Mesh):
        return x.sample(n, seed)
    if isinstance(x, PointCloud):
        return x.sample(n, seed)
    pts = np.asarray(x, dtype=np.float64)
    return PointCloud(pts).sample(n, seed)


def surface_metrics(pred, gt, samples_n: int = 200_000, seed: int = 0, threshold_m: float = 0.05) -> MetricsReport:
    """Both surfaces are sampled with the same seed, so the result is symmetric in its arguments."""
    for name, x in (("pred", pred), ("gt", gt)):
        if (isinstance(x, Mesh) and x.is_empty) or (isinstance(x, PointCloud) and len(x.points) == 0):
            raise ValueError(f"{name} surface is empty")
    p_pts, p_n = _samples(pred, samples_n, seed)
    g_pts, g_n = _samples(gt, samples_n, seed)
    d_pg, i_pg = cKDTree(g_pts).query(p_pts)
    d_gp, i_gp = cKDTree(p_pts).query(g_pts)
    acc = float(d_pg.mean())
    comp = float(d_gp.mean())
    precision = float(np.mean(d_pg < threshold_m))
    recall = float(np.mean(d_gp < threshold_m))
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    nc = float("nan")
    if p_n is not None and g_n is not None:
        c1 = np.abs(np.sum(p_n * g_n[i_pg], axis=1))
        c2 = np.abs(np.sum(g_n * p_n[i_gp], axis=1))
        nc = float(0.5 * (c1.mean() + c2.mean()))
    return MetricsReport(acc * 100, comp * 100, 0.5 * (acc + comp) * 100, f1 * 100, nc * 100,
                         precision_pct=precision * 100, recall_pct=recall * 100)


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def image_metrics(rendered: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    r = torch.as_tensor(np.asarray(rendered, dtype=np.float64))
    t = torch.as_tensor(np.asarray(target, dtype=np.float64))
    if r.ndim == 2:
        r, t = r[..., None], t[..., None]
    return psnr(rendered, target), float(_ssim(r, t))
