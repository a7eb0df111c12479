"""Synthetic multi-view scenes with analytic depth.

Scenes are a handful of primitives (spheres, axis-aligned boxes, disc planes)
inside a bounding sphere. Views are rendered by casting one ray per pixel and
keeping the nearest positive hit; depth is z-depth (the ray direction has unit
z in the camera frame), so unprojecting a rendered depth lands exactly on the
primitive surface. Background pixels carry no depth and are masked, which
exercises the mask-conditioning machinery even without dropout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidInputError, InvalidPoseError
from .export import atomic_write_bytes, write_json
from .geometry import (
    DepthMap,
    PinholeCamera,
    RayMap,
    build_raymap,
    normalize_scene,
    patch_center_grid,
    pixel_center_grid,
)

LIGHT_DIR = np.array([0.0, 0.0, 1.0])  # +z so 180-degree z-rotations preserve shading
AMBIENT = 0.25
BACKGROUND = np.array([0.07, 0.09, 0.13])
_HIT_EPS = 1e-9


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray


@dataclass(frozen=True)
class Plane:
    """A disc: point on the plane, unit normal, and radius (extent)."""

    point: np.ndarray
    normal: np.ndarray
    extent: float
    albedo: np.ndarray


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    bound_center: np.ndarray
    bound_radius: float

    def centroid(self) -> np.ndarray:
        return np.asarray(self.bound_center, dtype=np.float64)


def _rotz180(p: np.ndarray) -> np.ndarray:
    return np.array([-p[0], -p[1], p[2]])


def rotate_primitive_z180(prim):
    """Image of a primitive under a 180-degree rotation about the z axis."""
    if isinstance(prim, Sphere):
        return Sphere(_rotz180(prim.center), prim.radius, prim.albedo)
    if isinstance(prim, Box):
        lo, hi = _rotz180(prim.lo), _rotz180(prim.hi)
        return Box(np.minimum(lo, hi), np.maximum(lo, hi), prim.albedo)
    if isinstance(prim, Plane):
        return Plane(_rotz180(prim.point), _rotz180(prim.normal), prim.extent, prim.albedo)
    raise InvalidInputError(f"unknown primitive {type(prim)}")


def generate_scene(seed: int, symmetric: bool = False) -> Scene:
    """3-8 random primitives in a unit-ish region, deterministic per seed.

    With `symmetric=True` the scene is exactly invariant under a 180-degree
    rotation about z: primitives come in rotated pairs plus an on-axis sphere.
    """
    rng = np.random.default_rng(seed)
    n_prims = int(rng.integers(3, 9))
    prims = []

    def random_primitive(center):
        kind = rng.choice(["sphere", "box", "plane"], p=[0.5, 0.3, 0.2])
        albedo = rng.uniform(0.15, 0.95, 3)
        if kind == "sphere":
            return Sphere(center, float(rng.uniform(0.2, 0.45)), albedo)
        if kind == "box":
            half = rng.uniform(0.15, 0.4, 3)
            return Box(center - half, center + half, albedo)
        normal = rng.standard_normal(3)
        normal /= np.linalg.norm(normal)
        return Plane(center, normal, float(rng.uniform(0.3, 0.6)), albedo)

    if symmetric:
        n_pairs = max(1, n_prims // 2)
        for _ in range(n_pairs):
            center = rng.uniform(-0.65, 0.65, 3) * np.array([1.0, 1.0, 0.5])
            prim = random_primitive(center)
            prims.append(prim)
            prims.append(rotate_primitive_z180(prim))
        axis_center = np.array([0.0, 0.0, float(rng.uniform(-0.3, 0.3))])
        prims.append(Sphere(axis_center, float(rng.uniform(0.2, 0.4)), rng.uniform(0.15, 0.95, 3)))
        ground = True  # keep the pair count and layout exactly z-symmetric
    else:
        for _ in range(n_prims):
            center = rng.uniform(-0.65, 0.65, 3) * np.array([1.0, 1.0, 0.5])
            prims.append(random_primitive(center))
        ground = rng.uniform() < 0.75
    if ground:
        z = float(rng.uniform(-0.9, -0.6))
        prims.append(
            Plane(np.array([0.0, 0.0, z]), np.array([0.0, 0.0, 1.0]), float(rng.uniform(1.1, 1.4)), rng.uniform(0.15, 0.95, 3))
        )

    return Scene(primitives=tuple(prims), bound_center=np.zeros(3), bound_radius=1.8)


def _intersect(prim, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive ray parameter and surface normal per ray.

    `dirs` is (P, 3) and need not be unit length; the returned t is in units of
    the direction vector (z-depth for pixel rays). Misses are +inf.
    """
    p = dirs.shape[0]
    t = np.full(p, np.inf)
    normals = np.zeros((p, 3))

    if isinstance(prim, Sphere):
        oc = origin - prim.center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - prim.radius**2
        disc = b * b - 4.0 * a * c
        ok = disc > 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2.0 * a)
        t1 = (-b + sq) / (2.0 * a)
        tt = np.where(t0 > _HIT_EPS, t0, t1)
        ok &= tt > _HIT_EPS
        t = np.where(ok, tt, np.inf)
        pts = origin + t[:, None] * dirs
        normals = np.where(ok[:, None], (pts - prim.center) / prim.radius, 0.0)

    elif isinstance(prim, Box):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (prim.lo - origin) * inv
            t_hi = (prim.hi - origin) * inv
        near = np.minimum(t_lo, t_hi)
        far = np.maximum(t_lo, t_hi)
        # Parallel rays outside a slab never hit it.
        parallel = dirs == 0.0
        outside = (origin < prim.lo) | (origin > prim.hi)
        near = np.where(parallel, np.where(outside, np.inf, -np.inf), near)
        far = np.where(parallel, np.where(outside, -np.inf, np.inf), far)
        t_enter = near.max(axis=1)
        t_exit = far.min(axis=1)
        ok = (t_enter <= t_exit) & (t_exit > _HIT_EPS)
        tt = np.where(t_enter > _HIT_EPS, t_enter, t_exit)
        ok &= tt > _HIT_EPS
        t = np.where(ok, tt, np.inf)
        face = np.argmax(near == t_enter[:, None], axis=1)
        sign = np.where(t_enter == tt, -np.sign(dirs[np.arange(p), face]), np.sign(dirs[np.arange(p), face]))
        normals = np.zeros((p, 3))
        normals[np.arange(p), face] = np.where(ok, sign, 0.0)

    elif isinstance(prim, Plane):
        denom = dirs @ prim.normal
        numer = (prim.point - origin) @ prim.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = numer / denom
        pts = origin + tt[:, None] * dirs
        ok = (np.abs(denom) > 1e-12) & (tt > _HIT_EPS)
        ok &= np.linalg.norm(pts - prim.point, axis=1) <= prim.extent
        t = np.where(ok, tt, np.inf)
        facing = -np.sign(denom)  # normal flipped toward the viewer
        normals = np.where(ok[:, None], prim.normal[None, :] * facing[:, None], 0.0)

    else:
        raise InvalidInputError(f"unknown primitive {type(prim)}")
    return t, normals


def _camera_inside(prim, center: np.ndarray) -> bool:
    if isinstance(prim, Sphere):
        return bool(np.linalg.norm(center - prim.center) < prim.radius)
    if isinstance(prim, Box):
        return bool(np.all(center > prim.lo) and np.all(center < prim.hi))
    return False  # a disc has no interior


def render_view(scene: Scene, cam: PinholeCamera, h: int, w: int, pixel_grid: np.ndarray | None = None):
    """Flat-shaded render of the scene: (image, DepthMap), both h x w.

    Depth is the nearest positive z-depth per pixel; pixels with no hit are
    invalid and get the background color.
    """
    center = -cam.R.T @ cam.t
    for prim in scene.primitives:
        if _camera_inside(prim, center):
            raise InvalidPoseError("camera center lies inside a primitive")

    if pixel_grid is None:
        pixel_grid = pixel_center_grid(h, w)
    u = pixel_grid[..., 0].ravel()
    v = pixel_grid[..., 1].ravel()
    dirs_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    dirs = dirs_cam @ cam.R  # R^T applied to rows

    best_t = np.full(len(u), np.inf)
    color = np.tile(BACKGROUND, (len(u), 1))
    for prim in scene.primitives:
        t, normals = _intersect(prim, center, dirs)
        closer = t < best_t
        if not np.any(closer):
            continue
        lambert = np.clip(normals[closer] @ LIGHT_DIR, 0.0, 1.0)
        shade = AMBIENT + (1.0 - AMBIENT) * lambert
        color[closer] = prim.albedo[None, :] * shade[:, None]
        best_t[closer] = t[closer]

    valid = np.isfinite(best_t).reshape(h, w)
    depth = np.where(np.isfinite(best_t), best_t, 0.0).reshape(h, w)
    image = color.reshape(h, w, 3)
    return image, DepthMap(depth=depth, valid=valid)


def _look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation with +z toward the target and image-v downward."""
    z = target - position
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise InvalidInputError("camera looks straight along the up axis")
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=0)


def sample_camera_ring(
    scene: Scene,
    n: int,
    seed: int,
    spread_deg: float | None = None,
    az_jitter_deg: float = 18.0,
    elev_deg: float = 14.0,
    elev_jitter_deg: float = 8.0,
    radius: float = 2.0,
    radius_jitter: float = 0.2,
    focal_range: tuple = (26.0, 32.0),
    image_size: int = 32,
) -> list[PinholeCamera]:
    """Cameras on a jittered ring looking at the scene centroid.

    Azimuths are evenly spaced over `spread_deg` (default covers the full
    circle without wrapping) with optional jitter; elevation, ring radius, and
    focal length are drawn per camera from small ranges. n=2 with zero jitter,
    zero elevation, and 180-degree spread gives antipodal centers.
    """
    if not (2 <= n <= 8):
        raise InvalidInputError(f"need 2 <= n <= 8 views, got {n}")
    rng = np.random.default_rng(seed)
    target = scene.centroid()
    if spread_deg is None:
        spread_deg = 360.0 * (n - 1) / n
    base_az = rng.uniform(0.0, 360.0)
    cx = cy = (image_size - 1) / 2.0

    cams = []
    for k in range(n):
        az = np.deg2rad(base_az + spread_deg * k / (n - 1) + rng.uniform(-az_jitter_deg, az_jitter_deg))
        el = np.deg2rad(elev_deg + rng.uniform(-elev_jitter_deg, elev_jitter_deg))
        r = radius + rng.uniform(-radius_jitter, radius_jitter)
        pos = target + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R = _look_at(pos, target)
        f = rng.uniform(*focal_range)
        cams.append(PinholeCamera(fx=f, fy=f, cx=cx, cy=cy, R=R, t=-R @ pos))
    return cams


def apply_mask_dropout(dm: DepthMap, rate: float, seed: int, blob: bool = True) -> DepthMap:
    """Invalidate an exact `rate` fraction of valid pixels (sampled without
    replacement) plus one contiguous disc-shaped blob; deterministic per seed."""
    if not (0.0 <= rate < 1.0):
        raise InvalidInputError(f"dropout rate must be in [0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    h, w = dm.shape
    valid = dm.valid.copy()

    idx = np.flatnonzero(valid)
    n_drop = int(round(rate * idx.size))
    if n_drop > 0:
        drop = rng.choice(idx, size=n_drop, replace=False)
        valid.ravel()[drop] = False

    if blob:
        ci = rng.integers(0, h)
        cj = rng.integers(0, w)
        r = rng.integers(1, max(2, min(h, w) // 5))
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        valid &= (ii - ci) ** 2 + (jj - cj) ** 2 > r**2

    return DepthMap(depth=dm.depth, valid=valid)


# -- dataset records -------------------------------------------------------------


@dataclass(frozen=True)
class DatasetRecord:
    """One pre-normalized multi-view training example at grid resolution.

    `depths[i].valid` marks rendered (foreground) pixels; `masks` is the
    training mask after dropout, always a subset of it.
    """

    record_id: str
    seed: int
    images: np.ndarray  # N x S x S x 3
    cameras: list[PinholeCamera]
    depths: list[DepthMap]  # grid resolution, patch-center samples
    raymaps: list[RayMap]
    masks: np.ndarray  # N x h x w bool (post-dropout)
    norm_scale: float
    image_size: int
    grid_hw: tuple

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def ray_tensor(self) -> np.ndarray:
        return np.stack([rm.as_tensor() for rm in self.raymaps], axis=0)

    def foreground(self) -> np.ndarray:
        return np.stack([dm.valid for dm in self.depths], axis=0)


def make_record(
    seed: int,
    n_views: int | None = None,
    image_size: int = 32,
    grid_hw: tuple = (16, 16),
    dropout_rate: float = 0.15,
    symmetric: bool = False,
    ring_kwargs: dict | None = None,
) -> DatasetRecord:
    """Generate one record: scene, ring, renders, dropout, normalization."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    if n_views is None:
        n_views = int(rng.integers(2, 5))
    gh, gw = grid_hw
    patch = image_size // gh
    if patch * gh != image_size or (image_size // gw) * gw != image_size:
        raise InvalidInputError(f"grid {grid_hw} must divide image size {image_size}")

    scene = generate_scene(seed, symmetric=symmetric)
    grid = patch_center_grid(gh, gw, patch)

    # Resample the ring (bounded retries) until every view has enough
    # foreground for camera recovery from its GT raymap.
    min_fill = max(12, (gh * gw) // 16)
    for attempt in range(20):
        cams = sample_camera_ring(
            scene, n_views, seed=int(rng.integers(2**31)), image_size=image_size, **(ring_kwargs or {})
        )
        dms = [render_view(scene, cam, gh, gw, pixel_grid=grid)[1] for cam in cams]
        if min(int(dm.valid.sum()) for dm in dms) >= min_fill:
            break
    else:
        raise DataError(f"seed {seed}: could not find a ring with enough foreground in 20 tries")

    images, masks = [], []
    for cam, dm in zip(cams, dms):
        image, _ = render_view(scene, cam, image_size, image_size)
        images.append(image)
        dropped = apply_mask_dropout(dm, dropout_rate, seed=int(rng.integers(2**31)))
        masks.append(dropped.valid)

    cams, dms, scale, _ = normalize_scene(cams, dms, pixel_grids=[grid] * n_views)
    raymaps = [build_raymap(cam, dm, pixel_grid=grid) for cam, dm in zip(cams, dms)]

    return DatasetRecord(
        record_id=f"rec{seed:08d}",
        seed=seed,
        images=np.stack(images, axis=0),
        cameras=cams,
        depths=dms,
        raymaps=raymaps,
        masks=np.stack(masks, axis=0),
        norm_scale=scale,
        image_size=image_size,
        grid_hw=(gh, gw),
    )


def _check_record(rec: DatasetRecord) -> None:
    """Write-time consistency: raymaps match build_raymap, scene is normalized."""
    gh, gw = rec.grid_hw
    grid = patch_center_grid(gh, gw, rec.image_size // gh)
    for cam, dm, rm in zip(rec.cameras, rec.depths, rec.raymaps):
        ref = build_raymap(cam, dm, pixel_grid=grid)
        if not (
            np.allclose(ref.origins, rm.origins, atol=1e-9)
            and np.allclose(ref.endpoints, rm.endpoints, atol=1e-9)
            and np.array_equal(ref.valid, rm.valid)
        ):
            raise DataError(f"{rec.record_id}: raymap inconsistent with camera and depth")
    _, _, scale, frame = normalize_scene(rec.cameras, rec.depths, pixel_grids=[grid] * rec.n_views)
    if abs(scale - 1.0) > 1e-9 or np.max(np.abs(frame.R - np.eye(3))) > 1e-9 or np.max(np.abs(frame.t)) > 1e-9:
        raise DataError(f"{rec.record_id}: scene is not normalized")
    if np.any(rec.masks & ~rec.foreground()):
        raise DataError(f"{rec.record_id}: training mask marks a background pixel valid")


def save_record(root, rec: DatasetRecord) -> None:
    _check_record(rec)
    rdir = Path(root) / rec.record_id
    rdir.mkdir(parents=True, exist_ok=True)
    gh, gw = rec.grid_hw

    atomic_write_bytes(rdir / "images.f32", rec.images.astype("<f4").tobytes())
    depth = np.stack([dm.depth for dm in rec.depths], axis=0)
    atomic_write_bytes(rdir / "depth.f32", depth.astype("<f4").tobytes())
    atomic_write_bytes(rdir / "rays.f32", rec.ray_tensor().astype("<f4").tobytes())
    # 0 = background, 1 = foreground masked out by dropout, 2 = foreground valid
    mask_code = rec.foreground().astype(np.uint8) + rec.masks.astype(np.uint8)
    atomic_write_bytes(rdir / "mask.u8", mask_code.tobytes())

    meta = {
        "record_id": rec.record_id,
        "seed": rec.seed,
        "n_views": rec.n_views,
        "image_size": rec.image_size,
        "grid": [gh, gw],
        "norm_scale": rec.norm_scale,
        "mask_semantics": {"0": "background", "1": "foreground_dropped", "2": "foreground_valid"},
        "cameras": [
            {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "R": c.R.ravel().tolist(), "t": c.t.tolist()}
            for c in rec.cameras
        ],
    }
    write_json(rdir / "meta.json", meta)


def load_record(root, record_id: str) -> DatasetRecord:
    rdir = Path(root) / record_id
    if not (rdir / "meta.json").exists():
        raise DataError(f"record {record_id} not found under {root}")
    with open(rdir / "meta.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    n = meta["n_views"]
    s = meta["image_size"]
    gh, gw = meta["grid"]

    images = np.frombuffer((rdir / "images.f32").read_bytes(), dtype="<f4").reshape(n, s, s, 3).astype(np.float64)
    depth = np.frombuffer((rdir / "depth.f32").read_bytes(), dtype="<f4").reshape(n, gh, gw).astype(np.float64)
    rays = np.frombuffer((rdir / "rays.f32").read_bytes(), dtype="<f4").reshape(n, gh, gw, 8).astype(np.float64)
    mask_code = np.frombuffer((rdir / "mask.u8").read_bytes(), dtype=np.uint8).reshape(n, gh, gw)

    cameras = [
        PinholeCamera(c["fx"], c["fy"], c["cx"], c["cy"], np.array(c["R"]).reshape(3, 3), np.array(c["t"]))
        for c in meta["cameras"]
    ]
    fg = mask_code > 0
    depths = [DepthMap(depth=depth[i], valid=fg[i]) for i in range(n)]
    raymaps = [RayMap(origins=rays[i, ..., :4], endpoints=rays[i, ..., 4:], valid=fg[i]) for i in range(n)]
    return DatasetRecord(
        record_id=meta["record_id"],
        seed=meta["seed"],
        images=images,
        cameras=cameras,
        depths=depths,
        raymaps=raymaps,
        masks=mask_code == 2,
        norm_scale=meta["norm_scale"],
        image_size=s,
        grid_hw=(gh, gw),
    )


def generate_dataset(
    out_dir,
    n_records: int,
    base_seed: int = 0,
    views: tuple = (2, 4),
    image_size: int = 32,
    grid_hw: tuple = (16, 16),
    dropout_rate: float = 0.15,
    symmetric: bool = False,
    ring_kwargs: dict | None = None,
) -> dict:
    """Write `n_records` records; split is by seed parity (even=train, odd=heldout)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_records):
        seed = base_seed + i
        view_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        n_views = int(view_rng.integers(views[0], views[1] + 1))
        rec = make_record(
            seed,
            n_views=n_views,
            image_size=image_size,
            grid_hw=grid_hw,
            dropout_rate=dropout_rate,
            symmetric=symmetric,
            ring_kwargs=ring_kwargs,
        )
        save_record(out_dir, rec)
        records.append(
            {"id": rec.record_id, "seed": seed, "n_views": rec.n_views, "split": "train" if seed % 2 == 0 else "heldout"}
        )
    index = {
        "n_records": n_records,
        "base_seed": base_seed,
        "image_size": image_size,
        "grid": list(grid_hw),
        "views": list(views),
        "dropout_rate": dropout_rate,
        "symmetric": symmetric,
        "records": records,
    }
    write_json(out_dir / "index.json", index)
    return index


def load_index(root) -> dict:
    path = Path(root) / "index.json"
    if not path.exists():
        raise DataError(f"no dataset index at {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
