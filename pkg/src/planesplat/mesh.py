"""Triangle meshes and point clouds: containers, PLY round trip, area sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import read_ply, write_ply


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) metres
    triangles: np.ndarray  # (F, 3) int
    vertex_colors: np.ndarray | None = None  # (V, 3) in [0, 1]
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh has non-finite vertices")

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def sample(self, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """n points uniformly by area, with their face normals."""
        if self.is_empty:
            raise ValueError("cannot sample an empty mesh")
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        face = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        v = self.vertices[self.triangles[face]]
        pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
        return pts, self.face_normals()[face]

    def save(self, path) -> None:
        cols = {"x": self.vertices[:, 0].astype(np.float32), "y": self.vertices[:, 1].astype(np.float32),
                "z": self.vertices[:, 2].astype(np.float32)}
        if self.vertex_normals is not None:
            for i, k in enumerate(("nx", "ny", "nz")):
                cols[k] = self.vertex_normals[:, i].astype(np.float32)
        if self.vertex_colors is not None:
            c = np.clip(np.round(self.vertex_colors * 255), 0, 255).astype(np.uint8)
            for i, k in enumerate(("red", "green", "blue")):
                cols[k] = c[:, i]
        write_ply(path, cols, faces=self.triangles)

    @classmethod
    def load(cls, path) -> "Mesh":
        v, f = read_ply(path)
        verts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
        colors = normals = None
        if "red" in v:
            colors = np.stack([v["red"], v["green"], v["blue"]], 1).astype(np.float64) / 255.0
        if "nx" in v:
            normals = np.stack([v["nx"], v["ny"], v["nz"]], 1).astype(np.float64)
        return cls(verts, f if f is not None else np.zeros((0, 3), dtype=np.int64), colors, normals)


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def sample(self, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray | None]:
        if len(self.points) == 0:
            raise ValueError("cannot sample an empty point cloud")
        if len(self.points) <= n:
            return self.points, self.normals
        idx = np.sort(np.random.default_rng(seed).choice(len(self.points), size=n, replace=False))
        return self.points[idx], None if self.normals is None else self.normals[idx]

    def save(self, path) -> None:
        cols = {k: self.points[:, i] for i, k in enumerate("xyz")}
        if self.normals is not None:
            cols.update({k: self.normals[:, i] for i, k in enumerate(("nx", "ny", "nz"))})
        if self.colors is not None:
            c = np.clip(np.round(self.colors * 255), 0, 255).astype(np.uint8)
            cols.update({k: c[:, i] for i, k in enumerate(("red", "green", "blue"))})
        write_ply(path, cols)

    @classmethod
    def load(cls, path) -> "PointCloud":
        v, _ = read_ply(path)
        pts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
        normals = np.stack([v["nx"], v["ny"], v["nz"]], 1).astype(np.float64) if "nx" in v else None
        colors = (np.stack([v["red"], v["green"], v["blue"]], 1).astype(np.float64) / 255.0
                  if "red" in v else None)
        return cls(pts, normals, colors)
