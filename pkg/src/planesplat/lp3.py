"""Plane-region refinement: cross-view box fusion and geometric inspection.

Turns noisy per-view detector / segmenter proposals into a per-view
PlaneLabelMap using the prior depth (and the normal and plane-distance maps
derived from it).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .io import read_json, read_label_png, write_json, write_label_png

log = logging.getLogger(__name__)


@dataclass
class Lp3Config:
    kmax: int = 4
    merge_deg: float = 10.0
    dist_outlier_m: float = 0.05
    min_fragment_frac: float = 0.005  # of the image area
    max_normal_spread_deg: float = 15.0
    nested_thresh: float = 0.95
    fuse_main_only: bool = True
    normal_offset: int = 1
    warp_depth_tol: float = 0.05  # relative depth agreement when warping masks between views
    kmeans_iters: int = 100
    max_delta_levels: int = 4  # parallel planes separated per normal cluster
    seed: int = 0

    def min_fragment_px(self, width: int, height: int) -> int:
        return max(1, int(np.ceil(self.min_fragment_frac * width * height)))


@dataclass
class BoxProposal:
    view_id: str
    label: str
    score: float
    box: tuple[int, int, int, int]  # u_min, v_min, u_max, v_max (max exclusive)
    id: str = ""
    mask_id: str | None = None
    source: str = "detector"

    def __post_init__(self):
        u0, v0, u1, v1 = (int(x) for x in self.box)
        if not (u0 < u1 and v0 < v1):
            raise ValueError(f"degenerate box {self.box}")
        self.box = (u0, v0, u1, v1)

    @property
    def area(self) -> int:
        u0, v0, u1, v1 = self.box
        return (u1 - u0) * (v1 - v0)

    def key(self) -> tuple:
        return (self.label, self.box, self.source)

    def to_json(self) -> dict:
        return {"view_id": self.view_id, "label": self.label, "score": self.score, "box": list(self.box),
                "id": self.id, "mask_id": self.mask_id, "source": self.source}

    @classmethod
    def from_json(cls, d: dict) -> "BoxProposal":
        return cls(str(d["view_id"]), d["label"], float(d.get("score", 1.0)), tuple(d["box"]),
                   d.get("id", ""), d.get("mask_id"), d.get("source", "detector"))


@dataclass
class MaskProposal:
    view_id: str
    label: str
    score: float
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError(f"mask {self.id} is empty")

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class PlaneRegion:
    mask: np.ndarray
    label: str = "plane"
    normal: np.ndarray | None = None  # mean prior normal, camera frame
    source: str = ""
    cluster: int = -1  # normal cluster it came from
    level: int = -1  # plane-distance level within that cluster (0 = around the median)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class PlaneLabelMap:
    labels: np.ndarray  # (H, W) int, 0 = non-planar
    meta: dict[int, dict] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def num_planes(self) -> int:
        return int(self.labels.max(initial=0))

    def save(self, png_path: str | Path) -> None:
        png_path = Path(png_path)
        write_label_png(png_path, self.labels)
        write_json(png_path.with_suffix(".json"), {
            "labels": {str(k): v for k, v in sorted(self.meta.items())},
            "config": self.config,
        })

    @classmethod
    def load(cls, png_path: str | Path) -> "PlaneLabelMap":
        png_path = Path(png_path)
        labels = read_label_png(png_path)
        side = png_path.with_suffix(".json")
        meta, config = {}, {}
        if side.exists():
            doc = read_json(side)
            meta = {int(k): v for k, v in doc.get("labels", {}).items()}
            config = doc.get("config", {})
        return cls(labels, meta, config)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        return None
    return (int(us.min()), int(vs.min()), int(us.max()) + 1, int(vs.max()) + 1)


def box_intersection(a, b) -> int:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0) * max(h, 0)


def filter_nested_boxes(boxes: list[BoxProposal], thresh: float = 0.95) -> list[BoxProposal]:
    """Drop the smaller of any same-label pair with intersection / smaller area >= thresh."""
    kept: list[BoxProposal] = []
    for b in sorted(boxes, key=lambda b: (-b.area, b.id)):
        nested = any(a.label == b.label and box_intersection(a.box, b.box) >= thresh * min(a.area, b.area)
                     for a in kept)
        if not nested:
            kept.append(b)
    return kept


def _reproject_mask(mask, depth, src: geo.CameraView, dst: geo.CameraView):
    """Integer target pixels hit by the source mask's back-projected points."""
    vs, us = np.nonzero(mask & np.isfinite(depth) & (depth > 0))
    if len(us) == 0:
        return np.zeros((0, 2), dtype=int)
    P = geo.back_project_pixels(depth[vs, us], np.stack([us, vs], 1), src)
    rp = geo.transform_point(P, src, dst)
    front = ~rp.behind
    uv = np.round(rp.uv[front]).astype(int)
    inb = (uv[:, 0] >= 0) & (uv[:, 0] < dst.width) & (uv[:, 1] >= 0) & (uv[:, 1] < dst.height)
    return uv[inb]


def warp_mask(src_mask, src_depth, src_cam: geo.CameraView, dst_depth, dst_cam: geo.CameraView,
              box=None, depth_tol: float = 0.05) -> np.ndarray:
    """Target pixels whose prior-depth point lands inside the source mask.

    Stands in for the segmenter on boxes transferred from a neighbouring view.
    A pixel counts only if its depth agrees with the source depth at the
    landing pixel (relative tolerance), which rejects occluded points.
    """
    H, W = dst_cam.height, dst_cam.width
    region = np.isfinite(dst_depth) & (dst_depth > 0)
    if box is not None:
        u0, v0, u1, v1 = box
        inside = np.zeros_like(region)
        inside[v0:v1, u0:u1] = True
        region &= inside
    vs, us = np.nonzero(region)
    out = np.zeros((H, W), dtype=bool)
    if len(us) == 0:
        return out
    P = geo.back_project_pixels(dst_depth[vs, us], np.stack([us, vs], 1), dst_cam)
    rp = geo.transform_point(P, dst_cam, src_cam)
    ok = ~rp.behind
    uv = np.zeros((len(us), 2), dtype=int)
    uv[ok] = np.round(rp.uv[ok]).astype(int)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < src_cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < src_cam.height)
    hit = np.zeros(len(us), dtype=bool)
    idx = np.flatnonzero(ok)
    su, sv = uv[idx, 0], uv[idx, 1]
    ds = src_depth[sv, su]
    agree = np.abs(rp.z[idx] - ds) <= depth_tol * np.abs(ds)
    hit[idx] = src_mask[sv, su] & agree
    out[vs[hit], us[hit]] = True
    return out


def fuse_boxes_cross_view(boxes: dict, masks: dict, depth_priors: dict, cams: dict, neighbors: dict,
                          cfg: Lp3Config | None = None) -> tuple[dict, dict]:
    """Add boxes transferred from neighbouring views, then drop nested duplicates.

    boxes / masks: view_id -> list of proposals; depth_priors / cams: view_id ->
    array / CameraView; neighbors: view_id -> list of neighbour view ids.
    Returns (view_id -> boxes, box id -> (source view, source MaskProposal)).
    """
    cfg = cfg or Lp3Config()
    out, transfers = {}, {}
    for t in cams:
        result = list(boxes.get(t, []))
        for s in neighbors.get(t, []):
            if s == t or s not in cams:
                continue
            if depth_priors.get(s) is None:
                log.warning("view %s: neighbour %s has no depth prior, skipped", t, s)
                continue
            src = sorted(masks.get(s, []), key=lambda m: (-m.area, m.id))
            if cfg.fuse_main_only:
                src = src[:1]
            for mp in src:
                uv = _reproject_mask(mp.mask, depth_priors[s], cams[s], cams[t])
                if len(uv) == 0:
                    continue
                box = (int(uv[:, 0].min()), int(uv[:, 1].min()), int(uv[:, 0].max()) + 1, int(uv[:, 1].max()) + 1)
                bid = f"{s}:{mp.id}->{t}"
                nb = BoxProposal(t, mp.label, mp.score, box, id=bid, mask_id=None, source=f"fused:{s}:{mp.id}")
                if any(b.key() == nb.key() for b in result):
                    continue
                result.append(nb)
                transfers[bid] = (s, mp)
        out[t] = filter_nested_boxes(result, cfg.nested_thresh)
    return out, transfers


# --- geometric inspection -------------------------------------------------------

def kmeans(X: np.ndarray, k: int, seed: int = 0, iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; ties go to the lowest cluster index."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    k = min(k, n)
    rng = np.random.default_rng(seed)
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        tot = d2.sum()
        if tot <= 0:
            break  # fewer distinct points than k
        centers.append(X[rng.choice(n, p=d2 / tot)])
    C = np.asarray(centers)
    assign = None
    for _ in range(iters):
        d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(len(C)):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
    return assign, C


def _unit(v):
    return v / np.linalg.norm(v)


def angular_spread_deg(normals: np.ndarray) -> float:
    """RMS angle (degrees) between the normals and their normalised mean."""
    m = _unit(normals.mean(axis=0))
    cos = np.clip(normals @ m, -1.0, 1.0)
    return float(np.degrees(np.sqrt(np.mean(np.arccos(cos) ** 2))))


def _merge_clusters(assign, C, merge_deg):
    """Union clusters whose centroid directions are within merge_deg."""
    k = len(C)
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    used = [j for j in range(k) if np.any(assign == j)]
    dirs = {j: _unit(C[j]) for j in used if np.linalg.norm(C[j]) > 0}
    cos_t = np.cos(np.radians(merge_deg))
    for a in used:
        for b in used:
            if a < b and a in dirs and b in dirs and dirs[a] @ dirs[b] > cos_t:
                parent[find(b)] = find(a)
    roots = sorted({find(j) for j in used})
    remap = {j: roots.index(find(j)) for j in used}
    return np.array([remap[a] for a in assign]), len(roots)


def _edge_pixels(delta: np.ndarray, member: np.ndarray, thresh: float) -> np.ndarray:
    """Member pixels whose plane distance jumps by more than thresh to a member 4-neighbour."""
    edge = np.zeros_like(member)
    for axis in (0, 1):
        a = [slice(None), slice(None)]
        b = [slice(None), slice(None)]
        a[axis] = slice(None, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        both = member[a] & member[b]
        jump = both & (np.abs(delta[a] - delta[b]) > thresh)
        edge[a] |= jump
        edge[b] |= jump
    return edge


def inspect_and_split(mask, prior_normals: np.ndarray, prior_plane_dist: np.ndarray,
                      cfg: Lp3Config | None = None) -> list[PlaneRegion]:
    """Split one proposal mask into planar regions.

    Non-parallel planes separate by K-means on the prior normals (clusters
    with near-identical centroids are merged); within a cluster, parallel
    planes separate by plane distance, level by level around the median,
    and at plane-distance edges; components failing the spread / distance tests or
    smaller than the fragment size are dropped.
    """
    cfg = cfg or Lp3Config()
    if isinstance(mask, MaskProposal):
        label, mask = mask.label, mask.mask
    else:
        label = "plane"
    H, W = mask.shape
    min_px = cfg.min_fragment_px(W, H)
    valid = mask & np.isfinite(prior_normals).all(-1) & np.isfinite(prior_plane_dist)
    if valid.sum() < max(min_px, cfg.kmax):
        return []
    X = prior_normals[valid]
    assign, C = kmeans(X, cfg.kmax, seed=cfg.seed, iters=cfg.kmeans_iters)
    assign, nclust = _merge_clusters(assign, C, cfg.merge_deg)
    cluster_map = np.full((H, W), -1)
    cluster_map[valid] = assign
    stencil = np.ones((2 * cfg.normal_offset + 1,) * 2, bool)
    regions = []
    for c in range(nclust):
        # strips thinner than the normal stencil (e.g. creases between walls) carry mixed normals
        member = ndimage.binary_opening(cluster_map == c, structure=stencil)
        if member.sum() < min_px:
            continue
        # a curved surface yields wide clusters; reject them before the distance split can
        # cut them into small, locally flat pieces
        if angular_spread_deg(prior_normals[member]) > cfg.max_normal_spread_deg:
            continue
        # parallel planes share a normal cluster: peel off the pixels near the cluster's dominant plane
        # distance, then repeat on the outliers so a second (third, ...) parallel plane is kept
        pool = member & ~_edge_pixels(prior_plane_dist, member, cfg.dist_outlier_m)
        for level in range(cfg.max_delta_levels):
            if pool.sum() < min_px:
                break
            centre = _densest_level(prior_plane_dist[pool], cfg.dist_outlier_m)
            near = pool & (np.abs(prior_plane_dist - centre) <= cfg.dist_outlier_m)
            pool &= ~near
            for comp in _components(ndimage.binary_opening(near, structure=stencil)):
                for part in _distance_inliers(comp, prior_plane_dist, cfg.dist_outlier_m, min_px):
                    n = prior_normals[part]
                    if angular_spread_deg(n) > cfg.max_normal_spread_deg:
                        continue
                    regions.append(PlaneRegion(part, label, _unit(n.mean(axis=0)), cluster=c, level=level))
    return regions


def _densest_level(d: np.ndarray, thresh: float) -> float:
    """Median of the most populated window of width 2*thresh: about the median for a single plane;
    with several parallel planes the plain median can fall in the gap between them."""
    s = np.sort(d)
    hi = np.searchsorted(s, s + 2 * thresh, side="right")
    i = int(np.argmax(hi - np.arange(len(s))))
    return float(np.median(s[i:hi[i]]))


def _components(m: np.ndarray) -> list[np.ndarray]:
    lab, n = ndimage.label(m)  # default structure: 4-connectivity
    return [lab == i for i in range(1, n + 1)]


def _distance_inliers(comp, delta, thresh, min_px, max_rounds: int = 10) -> list[np.ndarray]:
    """Trim pixels far from the component's median plane distance, re-splitting as needed."""
    todo, done = [comp], []
    for _ in range(max_rounds):
        nxt = []
        for c in todo:
            if c.sum() < min_px:
                continue
            d = delta[c]
            keep = np.abs(d - np.median(d)) <= thresh
            if keep.all():
                done.append(c)
                continue
            trimmed = np.zeros_like(c)
            trimmed[c] = keep
            nxt.extend(_components(trimmed))
        todo = nxt
        if not todo:
            break
    return [c for c in done if c.sum() >= min_px]


def merge_coplanar_regions(regions: list[PlaneRegion], prior_plane_dist: np.ndarray,
                           cfg: Lp3Config | None = None) -> list[PlaneRegion]:
    """Union touching or overlapping regions of one class that describe the same plane.

    Overlapping proposals (e.g. masks transferred from several neighbours)
    otherwise leave clipped slivers of one wall as separate labels.
    """
    cfg = cfg or Lp3Config()
    n = len(regions)
    if n < 2:
        return list(regions)
    cos_t = np.cos(np.deg2rad(cfg.merge_deg))
    grown = [ndimage.binary_dilation(r.mask) for r in regions]
    med = [float(np.nanmedian(prior_plane_dist[r.mask])) for r in regions]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            a, b = regions[i], regions[j]
            if a.label != b.label or a.normal is None or b.normal is None:
                continue
            if float(np.dot(a.normal, b.normal)) < cos_t or abs(med[i] - med[j]) > cfg.dist_outlier_m:
                continue
            if (grown[i] & b.mask).any():
                parent[find(j)] = find(i)
    out = []
    for root in sorted({find(i) for i in range(n)}):
        members = [regions[i] for i in range(n) if find(i) == root]
        if len(members) == 1:
            out.append(members[0])
            continue
        mask = np.logical_or.reduce([m.mask for m in members])
        w = np.array([m.area for m in members], dtype=np.float64)
        nrm = _unit(np.sum([m.normal * wi for m, wi in zip(members, w)], axis=0))
        out.append(PlaneRegion(mask, members[0].label, nrm, "+".join(sorted({m.source for m in members}))))
    return out


def build_label_map(regions: list[PlaneRegion], shape: tuple[int, int], cfg: Lp3Config | None = None,
                    prior_normals: np.ndarray | None = None) -> PlaneLabelMap:
    """Rasterise regions largest-first (later ones clipped), relabel 1..L contiguously."""
    cfg = cfg or Lp3Config()
    H, W = shape
    min_px = cfg.min_fragment_px(W, H)
    labels = np.zeros((H, W), dtype=np.int64)
    taken = np.zeros((H, W), dtype=bool)
    meta = {}
    order = sorted(range(len(regions)), key=lambda i: -regions[i].area)
    for i in order:
        r = regions[i]
        m = r.mask & ~taken
        if m.sum() < min_px:
            continue
        lab = len(meta) + 1
        labels[m] = lab
        taken |= m
        if prior_normals is not None and np.isfinite(prior_normals[m]).all(-1).any():
            n = prior_normals[m]
            n = _unit(n[np.isfinite(n).all(-1)].mean(axis=0))
        elif r.normal is not None:
            n = r.normal
        else:
            n = np.array([0.0, 0.0, -1.0])
        meta[lab] = {"class": r.label, "normal": [float(x) for x in n], "pixels": int(m.sum()),
                     "source": r.source}
    return PlaneLabelMap(labels, meta, asdict(cfg))


def refine_view(view_id: str, boxes: list[BoxProposal], masks: list[MaskProposal], transfers: dict,
                depth_priors: dict, cams: dict, cfg: Lp3Config) -> PlaneLabelMap:
    """Masks for the surviving boxes -> inspected regions -> label map for one view."""
    cam = cams[view_id]
    depth = depth_priors[view_id]
    normals = geo.normal_from_depth(depth, cam, cfg.normal_offset)
    delta = geo.plane_distance_map(depth, normals, cam)
    by_id = {m.id: m for m in masks}
    regions = []
    for b in boxes:
        if b.id in transfers:
            s, mp = transfers[b.id]
            m = warp_mask(mp.mask, depth_priors[s], cams[s], depth, cam, b.box, cfg.warp_depth_tol)
        elif b.mask_id is not None and b.mask_id in by_id:
            m = by_id[b.mask_id].mask
        else:
            log.warning("view %s: box %s has no mask, skipped", view_id, b.id)
            continue
        if not m.any():
            continue
        for r in inspect_and_split(MaskProposal(view_id, b.label, b.score, m, b.id), normals, delta, cfg):
            r.source = b.source
            regions.append(r)
    regions = merge_coplanar_regions(regions, delta, cfg)
    return build_label_map(regions, depth.shape, cfg, normals)
