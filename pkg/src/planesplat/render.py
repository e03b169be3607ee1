"""Depth-sorted alpha-blending splatter.

Every (Gaussian, pixel) pair inside the Gaussian's cutoff ellipse becomes one
entry of a flat list. Entries are sorted by pixel, then by Gaussian centre
depth, and the front-to-back transmittance is a segmented exclusive cumulative
sum of log(1 - alpha). That keeps the forward pass a handful of vectorised
torch ops, and autograd through it yields the exact gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import CameraView
from .splat import GUARD_BAND, LOW_PASS, NEAR, GaussianScene, camera_tensors, gaussian_normal, project


@dataclass(frozen=True)
class RenderSettings:
    alpha_max: float = 0.99
    t_min: float = 1e-4  # early stop once transmittance would fall below this
    acc_min: float = 0.5  # depth is NaN where accumulated weight is below this
    low_pass: float = LOW_PASS
    near: float = NEAR
    guard: float | None = GUARD_BAND
    cutoff_sigma: float | None = 3.0  # None: every Gaussian touches every pixel
    den_min: float = 1e-6


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    gs_normal: torch.Tensor  # (H, W, 3) raw alpha-blended camera-frame normals
    plane_dist: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W), NaN where invalid
    acc: torch.Tensor  # (H, W)
    n_pairs: int = 0

    def unit_normal(self) -> torch.Tensor:
        n = self.gs_normal
        norm = n.norm(dim=-1, keepdim=True)
        return torch.where(norm > 1e-12, n / norm.clamp_min(1e-12), torch.full_like(n, float("nan")))

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).detach().numpy() for k in CHANNELS}


CHANNELS = ("color", "gs_normal", "plane_dist", "depth", "acc")


def pixel_rays(cam: CameraView, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(cam.rays(), dtype=dtype)


def _pairs(mu2d, conic, radius, order, W, H, cutoff_sigma):
    """Enumerate (gaussian, pixel) pairs; no gradients flow through here."""
    if cutoff_sigma is None:
        ng = len(order)
        g = order.repeat_interleave(W * H)
        pix = torch.arange(W * H).repeat(ng)
    else:
        c = mu2d[order]
        r = radius[order]
        umin = torch.ceil(c[:, 0] - r).clamp(0, W - 1).long()
        umax = torch.floor(c[:, 0] + r).clamp(-1, W - 1).long()
        vmin = torch.ceil(c[:, 1] - r).clamp(0, H - 1).long()
        vmax = torch.floor(c[:, 1] + r).clamp(-1, H - 1).long()
        # boxes entirely off-screen
        off = (c[:, 0] + r < 0) | (c[:, 0] - r > W - 1) | (c[:, 1] + r < 0) | (c[:, 1] - r > H - 1)
        bw = (umax - umin + 1).clamp_min(0)
        bh = (vmax - vmin + 1).clamp_min(0)
        cnt = torch.where(off, torch.zeros_like(bw), bw * bh)
        total = int(cnt.sum())
        local = torch.repeat_interleave(torch.arange(len(order)), cnt)
        start = torch.cumsum(cnt, 0) - cnt
        k = torch.arange(total) - start[local]
        u = umin[local] + k % bw[local]
        v = vmin[local] + torch.div(k, bw[local], rounding_mode="floor")
        g = order[local]
        d = torch.stack([u.to(mu2d.dtype), v.to(mu2d.dtype)], -1) - mu2d[g]
        cq = conic[g]
        power = cq[:, 0, 0] * d[:, 0] ** 2 + 2 * cq[:, 0, 1] * d[:, 0] * d[:, 1] + cq[:, 1, 1] * d[:, 1] ** 2
        keep = power <= cutoff_sigma**2
        g = g[keep]
        pix = (v * W + u)[keep]
    # stable: pairs were generated in depth order, so ties keep front-to-back order
    pix, perm = torch.sort(pix, stable=True)
    return g[perm], pix


def render(scene: GaussianScene, cam: CameraView, settings: RenderSettings | None = None) -> RenderOutput:
    s = settings or RenderSettings()
    W, H = cam.width, cam.height
    dtype = scene.mu.dtype
    proj = project(scene, cam, s.low_pass, s.near, s.guard)
    cov = proj.cov2d
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic = torch.stack([cov[:, 1, 1], -cov[:, 0, 1], -cov[:, 1, 0], cov[:, 0, 0]], -1).reshape(-1, 2, 2)
    conic = conic / det[:, None, None]
    _, R, _ = camera_tensors(cam, dtype)
    n_world = gaussian_normal(scene, cam)
    n_cam = n_world @ R.T
    d_i = (proj.p_cam * n_cam).sum(-1)  # signed plane distance to the camera centre
    opacity = torch.sigmoid(scene.opacity_logit)

    with torch.no_grad():
        visible = ~proj.culled
        mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
        lam = mid + torch.sqrt(torch.clamp(mid**2 - det, min=0.0))
        radius = s.cutoff_sigma * torch.sqrt(lam) if s.cutoff_sigma is not None else torch.zeros_like(lam)
        idx = torch.nonzero(visible).squeeze(1)
        depth_order = torch.sort(proj.depth_center[idx], stable=True).indices
        order = idx[depth_order]
        g, pix = _pairs(proj.mu2d.detach(), conic.detach(), radius, order, W, H, s.cutoff_sigma)

    P = H * W
    if len(g) == 0:
        blended = torch.zeros((P, 8), dtype=dtype)
    else:
        # per-Gaussian attributes gathered once per pair
        feat = torch.cat([
            proj.mu2d, conic[:, 0, 0:1], (conic[:, 0, 1:2] + conic[:, 1, 0:1]), conic[:, 1, 1:2],
            opacity[:, None], scene.rgb, n_cam, d_i[:, None],
        ], dim=1)
        fg = feat.index_select(0, g)
        geo, payload = fg.split([6, 7], dim=1)
        mx, my, ca, cb, cc, op = geo.unbind(1)
        dx = (pix % W).to(dtype) - mx
        dy = torch.div(pix, W, rounding_mode="floor").to(dtype) - my
        power = -0.5 * (ca * dx * dx + cb * dx * dy + cc * dy * dy)
        alpha = torch.clamp(op * torch.exp(power), max=s.alpha_max)
        log1m = torch.log1p(-alpha)
        cs = torch.cumsum(log1m, 0)
        excl_global = cs - log1m
        first = torch.ones(len(pix), dtype=torch.bool)
        first[1:] = pix[1:] != pix[:-1]
        start = torch.cummax(torch.where(first, torch.arange(len(pix)), torch.zeros_like(pix)), 0).values
        excl = excl_global - excl_global.index_select(0, start)
        T = torch.exp(excl)
        with torch.no_grad():
            live = (excl + log1m) >= np.log(s.t_min)
        w = torch.where(live, T * alpha, torch.zeros_like(alpha))
        vals = torch.cat([payload, torch.ones_like(w)[:, None]], dim=1) * w[:, None]
        blended = torch.zeros((P, 8), dtype=dtype).index_add(0, pix, vals)

    out_color, out_n, out_d, acc = blended[:, 0:3], blended[:, 3:6], blended[:, 6], blended[:, 7]
    color = out_color.reshape(H, W, 3)
    normal = out_n.reshape(H, W, 3)
    plane_dist = out_d.reshape(H, W)
    acc = acc.reshape(H, W)
    depth = depth_from_plane(plane_dist, normal, acc, cam, s.acc_min, s.den_min)
    return RenderOutput(color, normal, plane_dist, depth, acc, int(len(g)))


def depth_from_plane(plane_dist: torch.Tensor, normal: torch.Tensor, acc: torch.Tensor | None,
                     cam: CameraView, acc_min: float = 0.5, den_min: float = 1e-6) -> torch.Tensor:
    """Ray / plane intersection depth: delta / (N . K^-1 [u, v, 1])."""
    plane_dist = torch.as_tensor(plane_dist)
    normal = torch.as_tensor(normal)
    rays = pixel_rays(cam, normal.dtype)
    den = (normal * rays).sum(-1)
    ok = den.abs() >= den_min
    if acc is not None:
        ok = ok & (torch.as_tensor(acc) >= acc_min)
    safe = torch.where(ok, den, torch.ones_like(den))
    return torch.where(ok, plane_dist / safe, torch.full_like(den, float("nan")))


def render_backward(scene: GaussianScene, cam: CameraView, upstream: dict[str, torch.Tensor],
                    settings: RenderSettings | None = None) -> dict[str, torch.Tensor]:
    """Gradients of sum_c <upstream[c], channel_c> w.r.t. every scene parameter.

    NaN depth pixels are ignored (their upstream entries are dropped).
    """
    sc = scene.detach().requires_grad_(True)
    out = render(sc, cam, settings)
    total = torch.zeros((), dtype=sc.mu.dtype)
    for name, gout in upstream.items():
        ch = getattr(out, name)
        gout = torch.as_tensor(gout, dtype=ch.dtype)
        ok = torch.isfinite(ch)
        total = total + (torch.where(ok, ch, torch.zeros_like(ch)) * torch.where(ok, gout, torch.zeros_like(gout))).sum()
    params = sc.params()
    grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(params[k])) for k, g in zip(params, grads)}
