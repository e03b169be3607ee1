import numpy as np
import pytest

from planesplat.geometry import CameraView, intrinsics


def make_cam(f=100.0, cx=50.0, cy=50.0, w=101, h=101, R=None, t=None, id="0", fy=None):
    return CameraView(intrinsics(f, f if fy is None else fy, cx, cy), np.eye(3) if R is None else R,
                      np.zeros(3) if t is None else t, w, h, id)


def plane_depth(cam, n, d):
    """z-depth of the plane n.P = d (camera frame) at every pixel centre."""
    denom = cam.rays() @ np.asarray(n, float)
    with np.errstate(divide="ignore"):
        z = d / denom
    return np.where(z > 0, z, np.nan)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                     [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                     [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


@pytest.fixture
def cam100():
    return make_cam()


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance as acc
    if not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        ok, detail = acc.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
