import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planesplat import geometry as geo
from planesplat.fixtures import FixtureParams, Rect, Sphere, ray_cast, two_walls_cameras, two_walls_scene
from planesplat.lp3 import (BoxProposal, Lp3Config, MaskProposal, PlaneRegion, angular_spread_deg, build_label_map,
                            filter_nested_boxes, fuse_boxes_cross_view, inspect_and_split, kmeans, mask_bbox,
                            refine_view)

from .conftest import make_cam


def _priors(rc, cam, h=1):
    n = geo.normal_from_depth(rc.depth, cam, h)
    return n, geo.plane_distance_map(rc.depth, n, cam)


def _purity(regions, prim):
    out = []
    for r in regions:
        ids, cnt = np.unique(prim[r.mask], return_counts=True)
        out.append(cnt.max() / cnt.sum())
    return out


# --- cross-view fusion --------------------------------------------------------------

def _wall_mask_view(cam, prims):
    rc = ray_cast(prims, cam)
    return rc, rc.prim >= 0


def test_fuse_identical_cameras_copies_mask_bbox():
    cam = make_cam(w=64, h=48, cx=31.5, cy=23.5, f=40)
    prims = [Rect(np.array([-1.0, -0.5, 3.0]), np.array([1.2, 0, 0]), np.array([0, 0.8, 0]), (1, 1, 1), "w")]
    rc, m = _wall_mask_view(cam, prims)
    a = geo.CameraView(cam.K, cam.R, cam.t, 64, 48, "a")
    b = geo.CameraView(cam.K, cam.R, cam.t, 64, 48, "b")
    mp = MaskProposal("a", "wall", 1.0, m, "m0")
    fused, tr = fuse_boxes_cross_view({"a": [], "b": []}, {"a": [mp], "b": []}, {"a": rc.depth, "b": rc.depth},
                                      {"a": a, "b": b}, {"b": ["a"]})
    assert len(fused["b"]) == 1
    assert fused["b"][0].box == mask_bbox(m)
    assert fused["a"] == []


def test_fuse_partially_out_of_frame_clamped_to_visible_extent():
    src = make_cam(w=64, h=48, cx=31.5, cy=23.5, f=40, id="s")
    # target shifted right so the wall runs off its left border
    tgt = make_cam(w=64, h=48, cx=31.5, cy=23.5, f=40, t=np.array([-1.5, 0, 0]), id="t")
    prims = [Rect(np.array([-1.0, -0.5, 3.0]), np.array([1.6, 0, 0]), np.array([0, 1.0, 0]), (1, 1, 1), "w")]
    rc_s, m = _wall_mask_view(src, prims)
    rc_t, _ = _wall_mask_view(tgt, prims)
    fused, _ = fuse_boxes_cross_view({}, {"s": [MaskProposal("s", "wall", 1.0, m, "m")]},
                                     {"s": rc_s.depth, "t": rc_t.depth}, {"s": src, "t": tgt}, {"t": ["s"]})
    box = fused["t"][0].box
    # oracle: project every source mask pixel on its own and bound the in-frame hits
    hits = []
    for v, u in zip(*np.nonzero(m)):
        P = geo.back_project(rc_s.depth, src, (u, v))
        Xw = src.camera_to_world(P)
        uv, z = tgt.project(tgt.world_to_camera(Xw))
        ui, vi = int(np.round(uv[0])), int(np.round(uv[1]))
        if z > 0 and 0 <= ui < 64 and 0 <= vi < 48:
            hits.append((ui, vi))
    hits = np.array(hits)
    assert box == (hits[:, 0].min(), hits[:, 1].min(), hits[:, 0].max() + 1, hits[:, 1].max() + 1)
    assert box[0] == 0  # clamped at the left border
    assert ((rc_t.prim >= 0)[:, box[2]:] == 0).all()  # covers the wall's visible extent on the right


def test_fuse_plane_behind_target_adds_nothing():
    src = make_cam(w=64, h=48, cx=31.5, cy=23.5, f=40, id="s")
    R = np.diag([-1.0, 1.0, -1.0])  # turned around
    tgt = make_cam(w=64, h=48, cx=31.5, cy=23.5, f=40, R=R, id="t")
    prims = [Rect(np.array([-1.0, -0.5, 3.0]), np.array([1.6, 0, 0]), np.array([0, 1.0, 0]), (1, 1, 1), "w")]
    rc_s, m = _wall_mask_view(src, prims)
    fused, tr = fuse_boxes_cross_view({}, {"s": [MaskProposal("s", "wall", 1.0, m, "m")]},
                                      {"s": rc_s.depth, "t": np.full((48, 64), 2.0)}, {"s": src, "t": tgt},
                                      {"t": ["s"]})
    assert fused["t"] == [] and tr == {}


def test_fuse_is_idempotent(tmp_path):
    p = FixtureParams(n_views=6)
    cams = two_walls_cameras(p)
    prims = two_walls_scene()
    cd = {c.id: c for c in cams}
    depth, masks, boxes = {}, {}, {}
    for c in cams:
        rc = ray_cast(prims, c)
        depth[c.id] = rc.depth
        m = rc.prim >= 0
        masks[c.id] = [MaskProposal(c.id, "wall", 1.0, m, f"{c.id}m")]
        boxes[c.id] = [BoxProposal(c.id, "wall", 1.0, mask_bbox(m), f"{c.id}b", f"{c.id}m")]
    nb = {c.id: [o.id for o in cams if o.id != c.id] for c in cams}
    once, _ = fuse_boxes_cross_view(boxes, masks, depth, cd, nb)
    twice, _ = fuse_boxes_cross_view(once, masks, depth, cd, nb)
    for v in cd:
        assert sorted(b.key() for b in once[v]) == sorted(b.key() for b in twice[v])
        kept = filter_nested_boxes(once[v])
        assert sorted(b.key() for b in kept) == sorted(b.key() for b in once[v])


# --- nested boxes ---------------------------------------------------------------

def B(box, label="wall", id=""):
    return BoxProposal("0", label, 1.0, box, id)


def test_nested_same_label_removed():
    out = filter_nested_boxes([B((0, 0, 10, 10), id="a"), B((2, 2, 5, 5), id="b")])
    assert [b.id for b in out] == ["a"]


def test_nested_different_label_kept():
    out = filter_nested_boxes([B((0, 0, 10, 10), "wall", "a"), B((2, 2, 5, 5), "floor", "b")])
    assert sorted(b.id for b in out) == ["a", "b"]


def _contains(a, b):
    return a[0] <= b[0] and a[1] <= b[1] and a[2] >= b[2] and a[3] >= b[3]


def test_three_nested_only_largest_survives():
    boxes = [B((3, 3, 6, 6), id="c"), B((0, 0, 10, 10), id="a"), B((1, 1, 8, 8), id="b")]
    out = filter_nested_boxes(boxes)
    # brute-force pairwise containment oracle
    oracle = [x.id for x in boxes if not any(y is not x and y.label == x.label and _contains(y.box, x.box)
                                             for y in boxes)]
    assert [b.id for b in out] == oracle == ["a"]


@st.composite
def box_sets(draw):
    n = draw(st.integers(1, 8))
    out = []
    for i in range(n):
        u0, v0 = draw(st.integers(0, 20)), draw(st.integers(0, 20))
        w, h = draw(st.integers(1, 15)), draw(st.integers(1, 15))
        out.append(B((u0, v0, u0 + w, v0 + h), draw(st.sampled_from(["wall", "floor"])), f"b{i}"))
    return out


@settings(max_examples=100, deadline=None)
@given(boxes=box_sets())
def test_exact_containment_filter_matches_brute_force(boxes):
    # at threshold 1 containment is transitive, so the greedy filter equals the pairwise oracle
    out = filter_nested_boxes(boxes, thresh=1.0)

    def beats(y, x):
        return (y.area, -int(y.id[1:])) > (x.area, -int(x.id[1:]))

    oracle = {x.id for x in boxes if not any(y is not x and y.label == x.label and _contains(y.box, x.box)
                                             and (y.box != x.box or beats(y, x)) for y in boxes)}
    assert {b.id for b in out} == oracle
    assert {b.id for b in filter_nested_boxes(out, thresh=1.0)} == oracle


# --- inspection and splitting --------------------------------------------------------

def test_kmeans_deterministic_and_ties():
    X = np.array([[0, 0, 1.0]] * 5 + [[1.0, 0, 0]] * 5)
    a1, c1 = kmeans(X, 4, seed=3)
    a2, c2 = kmeans(X, 4, seed=3)
    assert np.array_equal(a1, a2) and np.array_equal(c1, c2)
    assert len(set(a1[:5])) == 1 and len(set(a1[5:])) == 1 and a1[0] != a1[5]


def test_split_perpendicular_walls():
    p = FixtureParams()
    cam = two_walls_cameras(p)[3]
    rc = ray_cast(two_walls_scene(), cam)
    n, d = _priors(rc, cam)
    regions = inspect_and_split(MaskProposal("0", "wall", 1.0, rc.prim >= 0), n, d)
    assert len(regions) == 2
    assert min(_purity(regions, rc.prim)) >= 0.99
    assert len({int(np.bincount(rc.prim[r.mask]).argmax()) for r in regions}) == 2


def test_split_parallel_walls_by_distance():
    cam = make_cam(w=64, h=48, cx=31.5, cy=23.5, f=40)
    prims = [Rect(np.array([-2.0, -2, 2.0]), np.array([2.0, 0, 0]), np.array([0, 4.0, 0]), (1, 1, 1), "near"),
             Rect(np.array([0.0, -4, 4.0]), np.array([4.0, 0, 0]), np.array([0, 8.0, 0]), (1, 1, 1), "far")]
    rc = ray_cast(prims, cam)
    n, d = _priors(rc, cam)
    regions = inspect_and_split(MaskProposal("0", "wall", 1.0, rc.prim >= 0), n, d)
    assert len(regions) == 2
    assert min(_purity(regions, rc.prim)) >= 0.99
    med = sorted(float(np.median(d[r.mask])) for r in regions)
    np.testing.assert_allclose(med, [-4.0, -2.0], atol=1e-9)


def test_sphere_gives_no_regions():
    cam_R, cam_t = geo.look_at([0, -0.7, 0.6], [0, 0, 0.6])
    cam = geo.CameraView(geo.intrinsics(32, 32, 31.5, 23.5), cam_R, cam_t, 64, 48)
    rc = ray_cast([Sphere(np.array([0, 0, 0.6]), 0.3, (1, 0, 0))], cam)
    m = rc.prim >= 0
    assert m.mean() > 0.1
    n, d = _priors(rc, cam)
    assert inspect_and_split(MaskProposal("0", "object", 1.0, m), n, d) == []


def test_region_invariants_on_box_room_views():
    from planesplat.fixtures import box_room_cameras, box_room_scene
    cfg = Lp3Config()
    prims = box_room_scene()
    for cam in box_room_cameras(FixtureParams(n_views=6)):
        rc = ray_cast(prims, cam)
        n, d = _priors(rc, cam)
        regs = inspect_and_split(MaskProposal(cam.id, "wall", 1.0, rc.prim >= 0), n, d, cfg)
        assert regs
        for r in regs:
            assert angular_spread_deg(n[r.mask]) <= cfg.max_normal_spread_deg
            assert np.abs(d[r.mask] - np.median(d[r.mask])).max() <= cfg.dist_outlier_m
            assert r.area >= cfg.min_fragment_px(cam.width, cam.height)


# --- label maps ----------------------------------------------------------------

def test_label_map_empty():
    lm = build_label_map([], (10, 12))
    assert lm.num_planes == 0 and not lm.labels.any()


def test_label_map_full_frame():
    lm = build_label_map([PlaneRegion(np.ones((10, 12), bool))], (10, 12))
    assert (lm.labels == 1).all()


def test_label_map_overlap_to_larger():
    a = np.zeros((20, 20), bool)
    a[0:10, 0:12] = True
    b = np.zeros((20, 20), bool)
    b[5:15, 8:14] = True  # smaller, overlaps a
    lm = build_label_map([PlaneRegion(b, "b"), PlaneRegion(a, "a")], (20, 20))
    assert lm.meta[1]["class"] == "a"
    assert (lm.labels[5:10, 8:12] == 1).all()
    assert (lm.labels[10:15, 8:14] == 2).all()


def test_label_map_save_load(tmp_path):
    a = np.zeros((20, 20), bool)
    a[2:12, 3:15] = True
    lm = build_label_map([PlaneRegion(a, "wall", np.array([0, 0, -1.0]))], (20, 20))
    lm.save(tmp_path / "x.png")
    from planesplat.lp3 import PlaneLabelMap
    back = PlaneLabelMap.load(tmp_path / "x.png")
    assert np.array_equal(back.labels, lm.labels) and back.meta == lm.meta


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 6))
def test_label_map_partition_contiguous(seed, n):
    rng = np.random.default_rng(seed)
    regs = []
    for _ in range(n):
        m = np.zeros((24, 24), bool)
        v0, u0 = rng.integers(0, 20, 2)
        m[v0:v0 + rng.integers(1, 15), u0:u0 + rng.integers(1, 15)] = True
        regs.append(PlaneRegion(m))
    cfg = Lp3Config(min_fragment_frac=0.01)
    lm = build_label_map(regs, (24, 24), cfg)
    labs = np.unique(lm.labels[lm.labels > 0])
    assert list(labs) == list(range(1, lm.num_planes + 1))
    for lab in labs:
        assert (lm.labels == lab).sum() >= cfg.min_fragment_px(24, 24)
    union = np.logical_or.reduce([r.mask for r in regs]) if regs else np.zeros((24, 24), bool)
    assert not (lm.labels > 0)[~union].any()
