"""File export: PLY point clouds and raw raymap tensors with JSON sidecars.

All writes are atomic (temp file + rename) so partially written outputs are
never observed. Binary formats are little-endian float32.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .geometry import RayMap, dehomogenize, canonicalize_homogeneous

RAYMAP_LAYOUT = "origin_xyzw,endpoint_xyzw"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_raymap(rm: RayMap, path) -> None:
    """Raw little-endian float32 HxWx8 blob plus a `<path>.json` sidecar."""
    path = Path(path)
    tensor = rm.as_tensor().astype("<f4")
    atomic_write_bytes(path, tensor.tobytes())
    h, w = rm.shape
    sidecar = {
        "shape": [h, w, 8],
        "layout": RAYMAP_LAYOUT,
        "valid": rm.valid.astype(int).ravel().tolist(),
    }
    write_json(str(path) + ".json", sidecar)


def load_raymap(path) -> RayMap:
    path = Path(path)
    with open(str(path) + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    if sidecar.get("layout") != RAYMAP_LAYOUT:
        raise InvalidInputError(f"unknown raymap layout {sidecar.get('layout')!r}")
    h, w, c = sidecar["shape"]
    if c != 8:
        raise InvalidInputError(f"raymap blob must have 8 channels, sidecar says {c}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    if raw.size != h * w * 8:
        raise InvalidInputError(f"raymap blob has {raw.size} floats, expected {h * w * 8}")
    tensor = raw.reshape(h, w, 8)
    valid = np.array(sidecar["valid"], dtype=bool).reshape(h, w)
    return RayMap(origins=tensor[..., :4], endpoints=tensor[..., 4:], valid=valid)


def raymap_point_cloud(rm: RayMap, image: np.ndarray | None = None, w_eps: float = 1e-6):
    """Valid endpoint positions (M, 3) and uint8 colors (M, 3) for export.

    Colors come from the source image averaged over the patch each raymap cell
    covers; gray when no image is given. Cells whose endpoint is at infinity
    (|w| <= w_eps) are dropped rather than exploding.
    """
    h, w = rm.shape
    endpoints = canonicalize_homogeneous(rm.endpoints.reshape(-1, 4))
    valid = rm.valid.ravel() & (np.abs(endpoints[:, 3]) > w_eps)
    pts = endpoints[valid, :3] / endpoints[valid, 3:4]

    if image is None:
        colors = np.full((len(pts), 3), 128, dtype=np.uint8)
    else:
        ih, iw = image.shape[:2]
        if ih % h != 0 or iw % w != 0:
            raise InvalidInputError(f"image {image.shape} is not a multiple of the raymap grid {rm.shape}")
        ph, pw = ih // h, iw // w
        patch_mean = image.reshape(h, ph, w, pw, 3).mean(axis=(1, 3)).reshape(-1, 3)
        colors = np.clip(np.round(patch_mean[valid] * 255.0), 0, 255).astype(np.uint8)
    return pts, colors


def export_ply(path, points: np.ndarray, colors: np.ndarray | None = None, binary: bool = False) -> None:
    """Write a point cloud as PLY (ASCII by default, binary little-endian optional)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if colors is None:
        colors = np.full((len(points), 3), 128, dtype=np.uint8)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if len(colors) != len(points):
        raise InvalidInputError(f"{len(points)} points but {len(colors)} colors")

    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    if binary:
        rec = np.zeros(len(points), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
        rec["xyz"] = points.astype("<f4")
        rec["rgb"] = colors
        atomic_write_bytes(path, header.encode("ascii") + rec.tobytes())
    else:
        lines = [
            "%.7g %.7g %.7g %d %d %d" % (p[0], p[1], p[2], c[0], c[1], c[2])
            for p, c in zip(points.astype(np.float32), colors)
        ]
        atomic_write_text(path, header + "\n".join(lines) + ("\n" if lines else ""))


def load_ply(path):
    """Read back a PLY written by export_ply (both formats). Returns (points, colors)."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    n = int(next(line.split()[-1] for line in header if line.startswith("element vertex")))
    binary = any("binary_little_endian" in line for line in header)
    if binary:
        rec = np.frombuffer(raw[end:], dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)], count=n)
        return rec["xyz"].astype(np.float64), rec["rgb"].copy()
    rows = raw[end:].decode("ascii").split()
    vals = np.array(rows, dtype=np.float64).reshape(n, 6)
    return vals[:, :3], vals[:, 3:].astype(np.uint8)
