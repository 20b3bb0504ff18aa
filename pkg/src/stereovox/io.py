"""File formats: PFM depth/disparity maps, voxel-grid JSON and bitmask, PNG images."""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

BITMASK_MAGIC = b"SVXB"


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM. Rows are stored bottom-up per the format."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("only single-channel PFM is supported")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        dims = f.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValueError(f"{path}: malformed PFM dimensions")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().rstrip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    shape = (h, w, channels) if channels == 3 else (h, w)
    if data.size != np.prod(shape):
        raise ValueError(f"{path}: truncated PFM payload")
    return data.reshape(shape)[::-1].astype(np.float32)


def save_png(path, image: np.ndarray) -> None:
    """Save a [0, 1] float image as 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float32) / 255.0


def occupied_indices(grid: np.ndarray) -> list[list[int]]:
    return np.argwhere(np.asarray(grid, dtype=bool)).tolist()


def grid_to_json(grid: np.ndarray, level: int, voxel_size_m: float) -> dict:
    g = np.asarray(grid, dtype=bool)
    return {
        "level": int(level),
        "resolution": int(g.shape[0]),
        "voxel_size_m": float(voxel_size_m),
        "occupied": occupied_indices(g),
    }


def grid_from_json(d: dict) -> np.ndarray:
    n = int(d["resolution"])
    g = np.zeros((n, n, n), dtype=bool)
    idx = np.asarray(d["occupied"], dtype=np.int64).reshape(-1, 3)
    if idx.size:
        g[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return g


def pyramid_to_json(pyramid) -> list[dict]:
    out = []
    for level, g in enumerate(pyramid.levels, start=1):
        size = pyramid.level_grid_spec(level).voxel_size_m if pyramid.grid_spec else 0.0
        out.append(grid_to_json(np.asarray(g) >= 0.5 if g.dtype != bool else g, level, size))
    return out


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def write_bitmask(path, grid: np.ndarray, level: int) -> None:
    """Packed bitmask, x fastest, after a 16-byte header (magic, resolution, level, reserved)."""
    g = np.asarray(grid, dtype=bool)
    n = g.shape[0]
    if g.shape != (n, n, n):
        raise ValueError("bitmask export expects a cubic grid")
    bits = np.packbits(g.transpose(2, 1, 0).reshape(-1), bitorder="little")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", BITMASK_MAGIC, n, level, 0))
        f.write(bits.tobytes())


def read_bitmask(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    magic, n, level, _ = struct.unpack("<4sIII", raw[:16])
    if magic != BITMASK_MAGIC:
        raise ValueError(f"{path}: bad bitmask magic {magic!r}")
    bits = np.unpackbits(np.frombuffer(raw[16:], dtype=np.uint8), bitorder="little")[: n ** 3]
    return bits.astype(bool).reshape(n, n, n).transpose(2, 1, 0), int(level)
