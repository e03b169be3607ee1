"""Finite-difference gradient harness shared by the renderer, loss and acceptance tests.

The oracle side never calls autograd: every parameter is nudged by +-h and the
scalar objective is recomputed with a plain forward render. For the
co-planarity term the plane parameters are refit once at the unperturbed
point and then held fixed, which is the stop-gradient the training loss uses.
"""
import numpy as np
import torch

from planesplat import losses as L
from planesplat.render import RenderSettings, render
from planesplat.splat import GaussianScene

from .conftest import make_cam

H = W = 8
SETTINGS = RenderSettings(cutoff_sigma=None)  # no cutoff ellipse: the objective is smooth


def small_scene(seed=0):
    rng = np.random.default_rng(seed)
    mu = np.column_stack([rng.uniform(-0.4, 0.4, 3), rng.uniform(-0.4, 0.4, 3), [2.0, 2.4, 2.8]])
    log_s = np.log(np.column_stack([rng.uniform(0.5, 0.8, 3), rng.uniform(0.3, 0.45, 3), rng.uniform(0.03, 0.08, 3)]))
    # small tilts away from fronto so normals and depth stay well conditioned
    rot = np.column_stack([np.ones(3), rng.uniform(-0.2, 0.2, (3, 3))])
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    op = np.log(np.array([0.7, 0.6, 0.8]) / (1 - np.array([0.7, 0.6, 0.8])))
    return GaussianScene.from_numpy(mu, log_s, rot, op, rng.uniform(0.1, 0.9, (3, 3)))


def small_cam():
    return make_cam(f=8.0, cx=3.5, cy=3.5, w=W, h=H)


def targets(seed=1):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=(H, W, 3)) + [0, 0, -3]
    labels = np.zeros((H, W), dtype=np.int64)
    labels[1:7, 1:5] = 1
    labels[2:6, 5:8] = 2
    return {
        "image": rng.uniform(0, 1, (H, W, 3)),
        "prior_depth": rng.uniform(1.8, 2.6, (H, W)),
        "prior_normal": n / np.linalg.norm(n, axis=-1, keepdims=True),
        "lt": rng.random((H, W)) < 0.8,
        "conf": rng.random((H, W)) < 0.8,
        "labels": labels,
    }


def objective(term, scene, cam, tg, planes=None):
    """Scalar loss for one term; `planes` fixes the co-planarity targets (oracle side)."""
    out = render(scene, cam, SETTINGS)
    if term == "l_rgb":
        return L.rgb_loss(out.color, tg["image"])
    if term == "l_s":
        return L.flatten_loss(scene)
    if term == "l_dn":
        gs = out.unit_normal()
        gs = torch.where((out.acc >= SETTINGS.acc_min)[..., None], gs, torch.full_like(gs, float("nan")))
        return L.dn_consistency_loss(gs, L.depth_normals(out.depth, cam), tg["lt"])[0]
    if term == "l_rd":
        return L.prior_depth_loss(out.depth, tg["prior_depth"], tg["lt"], tg["conf"])[0]
    if term == "l_rn":
        return L.prior_normal_loss(L.depth_normals(out.depth, cam), tg["prior_normal"], tg["labels"])[0]
    if term == "l_p":
        if planes is None:
            return L.coplanarity_loss(out.depth, tg["labels"], cam)[0]
        d = out.depth.detach().numpy()
        tot, n = 0.0, 0
        for pp in planes:
            m = (tg["labels"] == pp.plane_id) & np.isfinite(d)
            tgt = L.planar_depth(pp.A, cam)
            tot += np.abs(tgt[m] - d[m]).sum()
            n += int(m.sum())
        return torch.tensor(tot / n)
    raise KeyError(term)


def analytic_grad(term, scene, cam, tg):
    sc = scene.detach().requires_grad_(True)
    loss = objective(term, sc, cam, tg)
    params = sc.params()
    gs = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(params[k])).numpy() for k, g in zip(params, gs)}


def fd_grad(term, scene, cam, tg, h=1e-4):
    planes = None
    if term == "l_p":
        with torch.no_grad():
            planes = L.coplanarity_loss(render(scene, cam, SETTINGS).depth, tg["labels"], cam)[1]
    out = {}
    for name, base in scene.params().items():
        g = np.zeros(base.shape)
        for idx in np.ndindex(*base.shape):
            vals = []
            for sgn in (1, -1):
                p = {k: v.detach().clone() for k, v in scene.params().items()}
                p[name][idx] += sgn * h
                with torch.no_grad():
                    vals.append(float(objective(term, GaussianScene(**p), cam, tg, planes)))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out[name] = g
    return out


def max_rel_error(a: dict, f: dict, floor=1e-6) -> float:
    worst = 0.0
    for k in a:
        den = np.maximum(np.maximum(np.abs(a[k]), np.abs(f[k])), floor)
        worst = max(worst, float((np.abs(a[k] - f[k]) / den).max()))
    return worst
