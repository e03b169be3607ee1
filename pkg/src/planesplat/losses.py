"""Training losses and the least-squares plane machinery behind co-planarity.

Torch tensors in, torch scalars out. NaN marks invalid pixels; every loss
sanitises its inputs before doing arithmetic so that no NaN reaches the
backward pass.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import CameraView
from .splat import GaussianScene

log = logging.getLogger(__name__)

LAMBDAS = (0.05, 0.5, 0.05, 0.2)  # dn, p, rd, rn
TERMS = ("l_rgb", "l_s", "l_dn", "l_p", "l_rd", "l_rn")


class InsufficientPointsError(ValueError):
    pass


@dataclass
class PlaneParams:
    A: np.ndarray  # plane A^T P = 1, units 1/m
    plane_id: int = 0
    view_id: str = ""
    inlier_count: int = 0
    cond: float = 1.0
    residual: float = 0.0  # RMS of Q A - 1

    @property
    def degenerate(self) -> bool:
        return not np.isfinite(self.cond) or self.cond > 1e10

    @property
    def normal(self) -> np.ndarray:
        return self.A / np.linalg.norm(self.A)

    @property
    def distance(self) -> float:
        return float(1.0 / np.linalg.norm(self.A))


def fit_plane(points: np.ndarray, eps: float = 1e-6, plane_id: int = 0, view_id: str = "") -> PlaneParams:
    """A = (Q^T Q + eps I)^-1 Q^T 1 for the rows of Q = points."""
    Q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(Q) < 3:
        raise InsufficientPointsError(f"need at least 3 points, got {len(Q)}")
    QtQ = Q.T @ Q
    A = np.linalg.solve(QtQ + eps * np.eye(3), Q.sum(axis=0))
    sv = np.linalg.svd(Q, compute_uv=False)
    cond = float(sv[0] / sv[2]) if sv[2] > 0 else float("inf")
    resid = float(np.sqrt(np.mean((Q @ A - 1.0) ** 2)))
    return PlaneParams(A, plane_id, view_id, len(Q), cond, resid)


def planar_depth(A, cam: CameraView, mask: np.ndarray | None = None) -> np.ndarray:
    """D_p(p) = 1 / (A . K^-1 [u, v, 1]); NaN off-mask, near-singular, or behind."""
    A = A.A if isinstance(A, PlaneParams) else np.asarray(A, dtype=np.float64)
    den = cam.rays() @ A
    with np.errstate(divide="ignore", invalid="ignore"):
        d = 1.0 / den
    bad = (np.abs(den) < 1e-9) | ~(d > 0)
    if mask is not None:
        bad |= ~mask
    return np.where(bad, np.nan, d)


# --- helpers -----------------------------------------------------------------

def _rays(cam: CameraView, dtype) -> torch.Tensor:
    return torch.as_tensor(cam.rays(), dtype=dtype)


def _mask(m, shape) -> torch.Tensor:
    if m is None:
        return torch.ones(shape, dtype=torch.bool)
    return torch.as_tensor(np.asarray(m) if not isinstance(m, torch.Tensor) else m).to(torch.bool)


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    n = int(mask.sum())
    if n == 0:
        return values.new_zeros(()), 0
    return torch.where(mask, values, torch.zeros_like(values)).sum() / n, n


def depth_normals(depth: torch.Tensor, cam: CameraView, h: int = 1) -> torch.Tensor:
    """Differentiable twin of geometry.normal_from_depth (same neighbours, sign and NaNs)."""
    H, W = depth.shape
    valid = torch.isfinite(depth) & (depth > 0)
    d = torch.where(valid, depth, torch.zeros_like(depth))
    P = d[..., None] * _rays(cam, depth.dtype)
    out = torch.full((H, W, 3), float("nan"), dtype=depth.dtype)
    if H <= 2 * h or W <= 2 * h:
        return out
    c = P[h:-h, h:-h]
    n = torch.cross(P[h:-h, 2 * h:] - P[h:-h, :-2 * h], P[2 * h:, h:-h] - P[:-2 * h, h:-h], dim=-1)
    ok = (valid[h:-h, h:-h] & valid[h:-h, :-2 * h] & valid[h:-h, 2 * h:]
          & valid[:-2 * h, h:-h] & valid[2 * h:, h:-h])
    norm = n.norm(dim=-1)
    ok = ok & (norm >= 1e-12)
    n = n / torch.where(ok, norm, torch.ones_like(norm))[..., None]
    flip = (n * c).sum(-1) > 0
    n = torch.where(flip[..., None], -n, n)
    out[h:-h, h:-h] = torch.where(ok[..., None], n, torch.full_like(n, float("nan")))
    return out


# --- planar prior --------------------------------------------------------------

def coplanarity_loss(depth: torch.Tensor, labels: np.ndarray, cam: CameraView, eps: float = 1e-6,
                     min_px: int = 3) -> tuple[torch.Tensor, list[PlaneParams], int]:
    """Mean |D_p - D| over all plane pixels; planes are refit from the detached depth.

    Returns (loss, fitted planes, pixel count).
    """
    labels = np.asarray(labels)
    dn = depth.detach().numpy()
    valid = np.isfinite(dn) & (dn > 0)
    rays = cam.rays()
    target = np.full(dn.shape, np.nan)
    planes = []
    for lab in np.unique(labels[labels > 0]):
        m = (labels == lab) & valid
        if m.sum() < min_px:
            continue
        pts = dn[m][:, None] * rays[m]
        pp = fit_plane(pts, eps, plane_id=int(lab), view_id=cam.id)
        if pp.degenerate:
            log.debug("view %s plane %s: degenerate fit skipped", cam.id, lab)
            continue
        planes.append(pp)
        target[m] = planar_depth(pp.A, cam)[m]
    use = torch.as_tensor(np.isfinite(target))
    tgt = torch.as_tensor(np.nan_to_num(target), dtype=depth.dtype)
    dsafe = torch.where(use, depth, torch.zeros_like(depth))
    loss, n = _masked_mean((tgt - dsafe).abs(), use)
    return loss, planes, n


# --- geometric priors ----------------------------------------------------------

def prior_depth_loss(rendered: torch.Tensor, prior, lt_mask=None, conf_mask=None) -> tuple[torch.Tensor, int]:
    prior = torch.as_tensor(prior, dtype=rendered.dtype)
    m = (_mask(lt_mask, rendered.shape) & _mask(conf_mask, rendered.shape)
         & torch.isfinite(rendered) & torch.isfinite(prior))
    r = torch.where(m, rendered, torch.zeros_like(rendered))
    p = torch.where(m, prior, torch.zeros_like(prior))
    return _masked_mean((p - r) ** 2, m)


def prior_normal_loss(surface_normal: torch.Tensor, prior_normal, labels) -> tuple[torch.Tensor, int]:
    prior_normal = torch.as_tensor(prior_normal, dtype=surface_normal.dtype)
    m = (_mask(np.asarray(labels) > 0, surface_normal.shape[:2])
         & torch.isfinite(surface_normal).all(-1) & torch.isfinite(prior_normal).all(-1))
    a = torch.where(m[..., None], surface_normal, torch.zeros_like(surface_normal))
    b = torch.where(m[..., None], prior_normal, torch.zeros_like(prior_normal))
    per_px = (b - a).abs().sum(-1) + (1.0 - (a * b).sum(-1))
    return _masked_mean(per_px, m)


def dn_consistency_loss(gs_normal: torch.Tensor, surface_normal: torch.Tensor, lt_mask=None) -> tuple[torch.Tensor, int]:
    m = (_mask(lt_mask, gs_normal.shape[:2]) & torch.isfinite(gs_normal).all(-1)
         & torch.isfinite(surface_normal).all(-1))
    a = torch.where(m[..., None], gs_normal, torch.zeros_like(gs_normal))
    b = torch.where(m[..., None], surface_normal, torch.zeros_like(surface_normal))
    return _masked_mean((a - b).abs().sum(-1), m)


# --- photometric / flattening --------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(img1: torch.Tensor, img2: torch.Tensor, window: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> torch.Tensor:
    """Per-pixel SSIM of (H, W, C) images; zero padding at the border (3DGS convention)."""
    x = img1.permute(2, 0, 1)[None]
    y = img2.permute(2, 0, 1)[None]
    C = x.shape[1]
    w = _gaussian_window(window, sigma, x.dtype).expand(C, 1, window, window)
    conv = lambda t: F.conv2d(t, w, padding=window // 2, groups=C)
    mu_x, mu_y = conv(x), conv(y)
    sxx = conv(x * x) - mu_x**2
    syy = conv(y * y) - mu_y**2
    sxy = conv(x * y) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    return s[0].permute(1, 2, 0)


def ssim(img1: torch.Tensor, img2: torch.Tensor, **kw) -> torch.Tensor:
    return ssim_map(img1, img2, **kw).mean()


def rgb_loss(rendered: torch.Tensor, target, l1_weight: float = 0.8) -> torch.Tensor:
    target = torch.as_tensor(target, dtype=rendered.dtype)
    l1 = (rendered - target).abs().mean()
    return l1_weight * l1 + (1.0 - l1_weight) * (1.0 - ssim(rendered, target))


def flatten_loss(scene: GaussianScene) -> torch.Tensor:
    """Mean over Gaussians of the smallest scale."""
    if len(scene) == 0:
        return scene.log_scale.new_zeros(())
    return torch.exp(scene.log_scale).min(dim=1).values.mean()


# --- total -----------------------------------------------------------------------

@dataclass
class LossBreakdown:
    l_rgb: float = 0.0
    l_s: float = 0.0
    l_dn: float = 0.0
    l_p: float = 0.0
    l_rd: float = 0.0
    l_rn: float = 0.0
    total: float = 0.0
    weights: dict = field(default_factory=dict)  # effective weight per term (0 = inactive)
    counts: dict = field(default_factory=dict)  # pixels / Gaussians behind each term

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in TERMS}
        row["total"] = self.total
        row.update({f"w_{k[2:]}": self.weights.get(k, 0.0) for k in TERMS})
        row.update({f"n_{k[2:]}": self.counts.get(k, 0) for k in TERMS})
        return row


def total_loss(parts: dict, lambdas=LAMBDAS, active: dict | None = None, counts: dict | None = None):
    """L_rgb + L_s + l1 L_dn + l2 L_p + l3 L_rd + l4 L_rn.

    `parts` maps term name to a float or a torch scalar; inactive terms get
    weight 0. Returns (differentiable total or float, LossBreakdown).
    """
    lam = dict(zip(TERMS, (1.0, 1.0) + tuple(lambdas)))
    weights = {k: (lam[k] if (active is None or active.get(k, True)) else 0.0) for k in TERMS}
    total = 0.0
    for k in TERMS:
        if weights[k] != 0.0 and k in parts:
            total = total + weights[k] * parts[k]
    val = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    bd = LossBreakdown(**{k: val(parts.get(k, 0.0)) for k in TERMS}, total=val(total),
                       weights=weights, counts=dict(counts or {}))
    return total, bd


def breakdown_dict(bd: LossBreakdown) -> dict:
    return asdict(bd)
