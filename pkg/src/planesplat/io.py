"""File formats: PFM rasters, 8/16-bit PNG masks and labels, binary PLY."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


class FormatError(ValueError):
    pass


# --- PFM -------------------------------------------------------------------

def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0). 2-D -> 'Pf', (H, W, 3) -> 'PF'."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise FormatError(f"cannot write array of shape {data.shape} as PFM")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        # PFM stores rows bottom-to-top
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        if header not in ("Pf", "PF"):
            raise FormatError(f"{path}: not a PFM file")
        dims = f.readline().decode("ascii").split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().decode("ascii").strip())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if header == "PF" else 1
        buf = np.frombuffer(f.read(), dtype=dtype)
    if buf.size != w * h * ch:
        raise FormatError(f"{path}: truncated PFM payload")
    arr = buf.reshape((h, w, ch) if ch == 3 else (h, w))[::-1]
    return arr.astype(np.float64)


# --- PNG -------------------------------------------------------------------

def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path: str | Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:  # PIL raises a zoo of exception types on corrupt data
        raise FormatError(f"{path}: unreadable PNG ({e})") from e
    return np.asarray(img.convert("L")) >= 128


def write_label_png(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise FormatError("labels must fit in uint16")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def read_label_png(path: str | Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise FormatError(f"{path}: unreadable PNG ({e})") from e
    return np.asarray(img).astype(np.int64)


def write_rgb_png(path: str | Path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def read_rgb_png(path: str | Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise FormatError(f"{path}: unreadable PNG ({e})") from e
    return np.asarray(img.convert("RGB")).astype(np.float64) / 255.0


# --- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "f4": "float", "f8": "double", "u1": "uchar", "i4": "int", "u4": "uint",
}
_PLY_TYPES_INV = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
}


def write_ply(path: str | Path, vertex: dict[str, np.ndarray], faces: np.ndarray | None = None,
              comments: list[str] | None = None) -> None:
    """Binary little-endian PLY. `vertex` maps property name -> 1-D array."""
    names = list(vertex)
    n = len(vertex[names[0]]) if names else 0
    dtype = np.dtype([(k, np.asarray(vertex[k]).dtype.newbyteorder("<")) for k in names])
    rec = np.empty(n, dtype=dtype)
    for k in names:
        rec[k] = vertex[k]
    lines = ["ply", "format binary_little_endian 1.0"]
    for c in comments or []:
        lines.append(f"comment {c}")
    lines.append(f"element vertex {n}")
    for k in names:
        lines.append(f"property {_PLY_TYPES[rec.dtype[k].str[1:]]} {k}")
    if faces is not None:
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(rec.tobytes())
        if faces is not None:
            fr = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            fr["n"] = 3
            fr["idx"] = np.asarray(faces, dtype=np.int32)
            f.write(fr.tobytes())


def read_ply(path: str | Path) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Reads what write_ply writes (binary LE, triangle faces only)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        props: list[tuple[str, str]] = []
        n_vert = n_face = 0
        current = None
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: unterminated PLY header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format" and tok[1] != "binary_little_endian":
                raise FormatError(f"{path}: only binary_little_endian PLY is supported")
            if tok[0] == "element":
                current = tok[1]
                if current == "vertex":
                    n_vert = int(tok[2])
                elif current == "face":
                    n_face = int(tok[2])
            elif tok[0] == "property" and current == "vertex":
                props.append((tok[2], _PLY_TYPES_INV[tok[1]]))
            elif tok[0] == "end_header":
                break
        rec = np.frombuffer(f.read(np.dtype(props).itemsize * n_vert), dtype=np.dtype(props))
        faces = None
        if n_face:
            fr = np.frombuffer(f.read(13 * n_face), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            if np.any(fr["n"] != 3):
                raise FormatError(f"{path}: only triangle faces are supported")
            faces = fr["idx"].astype(np.int64)
    return {k: np.array(rec[k]) for k, _ in props}, faces


# --- misc ------------------------------------------------------------------

def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def atomic_dir(final: Path):
    """Temp directory next to `final`; caller renames it into place on success."""
    final.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))


def replace_dir(tmp: Path, final: Path) -> None:
    import shutil

    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
