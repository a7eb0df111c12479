"""Projective and Euclidean camera geometry.

Conventions:
  - World-to-camera extrinsics: x_cam = R @ x_world + t, camera center c = -R^T t.
  - Pixel coordinates (u, v) are continuous; integer values address pixel centers.
  - Homogeneous points are 4-vectors (x, y, z, w) normalized to unit L2 norm,
    so arbitrarily distant geometry stays bounded; w -> 0 approaches infinity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateRaysError,
    DegenerateSceneError,
    InsufficientDataError,
    InvalidInputError,
)

ROTATION_TOL = 1e-9


def _as_readonly(a, dtype=np.float64):
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PinholeCamera:
    """Intrinsics and world-to-camera extrinsics of one view."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # 3x3 world-to-camera rotation
    t: np.ndarray  # 3-vector world-to-camera translation

    def __post_init__(self):
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "R", _as_readonly(self.R))
        object.__setattr__(self, "t", _as_readonly(self.t))
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.R.shape != (3, 3) or self.t.shape != (3,):
            raise InvalidInputError(f"bad extrinsic shapes R{self.R.shape} t{self.t.shape}")
        if not (np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.t))):
            raise InvalidInputError("extrinsics contain non-finite values")
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > ROTATION_TOL:
            raise InvalidInputError("R is not orthonormal within 1e-9")
        if abs(np.linalg.det(self.R) - 1.0) > ROTATION_TOL:
            raise InvalidInputError("det(R) != 1 within 1e-9")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel nonnegative depth (z in the camera frame) with a validity mask."""

    depth: np.ndarray  # H x W, world units
    valid: np.ndarray  # H x W bool; False where depth is missing

    def __post_init__(self):
        depth = _as_readonly(self.depth)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        valid.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)
        if depth.ndim != 2 or valid.shape != depth.shape:
            raise InvalidInputError(f"bad depth map shapes {depth.shape} vs {valid.shape}")
        if np.any(depth[valid] < 0):
            raise InvalidInputError("negative depth at a valid pixel")

    @property
    def shape(self):
        return self.depth.shape


# Sentinel stored at invalid raymap cells; keeps serialization deterministic.
INVALID_CELL = np.array([0.0, 0.0, 0.0, 1.0])


@dataclass(frozen=True)
class RayMap:
    """Per-pixel homogeneous ray origin/endpoint pairs in a global frame."""

    origins: np.ndarray  # H x W x 4
    endpoints: np.ndarray  # H x W x 4
    valid: np.ndarray  # H x W bool

    def __post_init__(self):
        origins = _as_readonly(self.origins)
        endpoints = _as_readonly(self.endpoints)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        valid.setflags(write=False)
        object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "endpoints", endpoints)
        object.__setattr__(self, "valid", valid)
        if origins.ndim != 3 or origins.shape[-1] != 4:
            raise InvalidInputError(f"origins must be HxWx4, got {origins.shape}")
        if endpoints.shape != origins.shape or valid.shape != origins.shape[:2]:
            raise InvalidInputError("raymap field shapes disagree")

    @property
    def shape(self):
        return self.valid.shape

    def as_tensor(self) -> np.ndarray:
        """H x W x 8 array, origin channels first."""
        return np.concatenate([self.origins, self.endpoints], axis=-1)


@dataclass(frozen=True)
class RigidTransform:
    """x' = R @ x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _as_readonly(self.R))
        object.__setattr__(self, "t", _as_readonly(self.t))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def inv(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


def homogenize(pt: np.ndarray) -> np.ndarray:
    """Map Euclidean points (..., 3) to unit-norm homogeneous points (..., 4).

    (x, y, z) -> (x, y, z, 1) / sqrt(x^2 + y^2 + z^2 + 1); the result always has
    unit L2 norm and w in (0, 1], which bounds unbounded geometry.
    """
    pt = np.asarray(pt, dtype=np.float64)
    if pt.shape[-1] != 3:
        raise InvalidInputError(f"expected (..., 3) points, got {pt.shape}")
    if not np.all(np.isfinite(pt)):
        raise InvalidInputError("non-finite point passed to homogenize")
    w = 1.0 / np.sqrt(np.sum(pt * pt, axis=-1) + 1.0)
    return np.concatenate([pt * w[..., None], w[..., None]], axis=-1)


def canonicalize_homogeneous(hp: np.ndarray) -> np.ndarray:
    """Flip sign so w >= 0; p and -p are the same projective point."""
    hp = np.asarray(hp, dtype=np.float64)
    sign = np.where(hp[..., 3:4] < 0, -1.0, 1.0)
    return hp * sign


def dehomogenize(hp: np.ndarray, w_eps: float = 1e-6) -> np.ndarray:
    """Map homogeneous points (..., 4) back to Euclidean (..., 3).

    Raises AtInfinityError if any |w| <= w_eps: the point has no Euclidean
    representation at this threshold (network outputs are unconstrained, so
    callers must be prepared for this).
    """
    from .errors import AtInfinityError

    hp = np.asarray(hp, dtype=np.float64)
    if hp.shape[-1] != 4:
        raise InvalidInputError(f"expected (..., 4) points, got {hp.shape}")
    if not np.all(np.isfinite(hp)):
        raise InvalidInputError("non-finite homogeneous point")
    w = hp[..., 3]
    if np.any(np.abs(w) <= w_eps):
        raise AtInfinityError(f"|w| <= {w_eps}: point at infinity")
    return hp[..., :3] / w[..., None]


def camera_center(cam: PinholeCamera) -> np.ndarray:
    """Euclidean camera center -R^T t (the shared origin of all pixel rays)."""
    return -cam.R.T @ cam.t


def unproject_endpoint(cam: PinholeCamera, pixel, depth: float) -> np.ndarray:
    """World-frame surface point seen by `pixel` at the given z-depth.

    Computes R^T (d * K^{-1} [u, v, 1]^T - t). Depth 0 lands exactly at the
    camera center.
    """
    depth = float(depth)
    if not np.isfinite(depth) or depth < 0:
        raise InvalidInputError(f"depth must be finite and >= 0, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    ray_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return cam.R.T @ (depth * ray_cam - cam.t)


def pixel_center_grid(h: int, w: int) -> np.ndarray:
    """(H, W, 2) grid of (u, v) pixel-center coordinates: u = column, v = row."""
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([u, v], axis=-1)


def patch_center_grid(h: int, w: int, patch: int) -> np.ndarray:
    """(h, w, 2) grid of (u, v) at patch centers of an image with `patch`-sized cells."""
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    half = (patch - 1) / 2.0
    return np.stack([u * patch + half, v * patch + half], axis=-1)


def build_raymap(cam: PinholeCamera, dm: DepthMap, pixel_grid: np.ndarray | None = None) -> RayMap:
    """Per-pixel homogeneous ray origins and endpoints for one view.

    Every valid pixel's origin is the (shared) camera center; its endpoint is
    the unprojected surface point. Invalid pixels hold the (0, 0, 0, 1)
    sentinel. `pixel_grid` overrides the default integer pixel centers (used
    for grid-resolution maps sampled at patch centers).
    """
    h, w = dm.shape
    if pixel_grid is None:
        pixel_grid = pixel_center_grid(h, w)
    if pixel_grid.shape != (h, w, 2):
        raise InvalidInputError(f"pixel grid {pixel_grid.shape} does not match depth {dm.shape}")

    u = pixel_grid[..., 0]
    v = pixel_grid[..., 1]
    rays_cam = np.stack(
        [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1
    )
    depth = np.where(dm.valid, dm.depth, 0.0)
    pts = (depth[..., None] * rays_cam - cam.t) @ cam.R  # row-vector form of R^T @ x

    origins = np.broadcast_to(homogenize(camera_center(cam)), (h, w, 4)).copy()
    endpoints = homogenize(pts)
    origins[~dm.valid] = INVALID_CELL
    endpoints[~dm.valid] = INVALID_CELL
    return RayMap(origins=origins, endpoints=endpoints, valid=dm.valid)


def _lower_median(values: np.ndarray) -> float:
    """Deterministic, order-stable median: element at index (n-1)//2 after sort."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise DegenerateSceneError("median of empty set")
    return float(values[(values.size - 1) // 2])


def normalize_scene(
    cams: list[PinholeCamera],
    dms: list[DepthMap],
    pixel_grids: list[np.ndarray] | None = None,
):
    """Re-express a multi-view scene in a canonical frame.

    The world frame is rotated/translated so camera 1 has identity rotation and
    its center at the origin, then scaled so the (lower) median distance from
    the origin of camera 1's unprojected valid points equals 1.

    Returns (cams', dms', scale, frame) where the forward map applied to world
    points is x' = scale * (frame.R @ x + frame.t).
    """
    if len(cams) != len(dms) or not cams:
        raise InvalidInputError("need equal nonzero numbers of cameras and depth maps")
    cam0, dm0 = cams[0], dms[0]
    if not np.any(dm0.valid):
        raise DegenerateSceneError("first view has no valid depth")

    frame = RigidTransform(cam0.R, cam0.t)  # new world = camera-1 frame

    h, w = dm0.shape
    grid0 = pixel_grids[0] if pixel_grids is not None else pixel_center_grid(h, w)
    u = grid0[..., 0][dm0.valid]
    v = grid0[..., 1][dm0.valid]
    d = dm0.depth[dm0.valid]
    rays = np.stack([(u - cam0.cx) / cam0.fx, (v - cam0.cy) / cam0.fy, np.ones_like(u)], axis=-1)
    dists = d * np.linalg.norm(rays, axis=-1)  # camera-1 frame == new frame
    median = _lower_median(dists)
    if median <= 0:
        raise DegenerateSceneError("median point distance is zero (all valid depths zero)")
    scale = 1.0 / median

    new_cams = []
    for cam in cams:
        r_new = cam.R @ frame.R.T
        t_new = scale * (cam.t - r_new @ frame.t)
        new_cams.append(PinholeCamera(cam.fx, cam.fy, cam.cx, cam.cy, r_new, t_new))
    new_dms = [DepthMap(depth=dm.depth * scale, valid=dm.valid) for dm in dms]
    return new_cams, new_dms, scale, frame


def rays_to_camera(rm: RayMap, pixel_grid: np.ndarray | None = None, w_eps: float = 1e-6) -> PinholeCamera:
    """Recover a pinhole camera from a (possibly predicted) raymap.

    The center is the mean of the dehomogenized valid origins. Per-pixel
    directions d_i = normalize(endpoint_i - center) are aligned with pixel
    coordinates by the 3x3 matrix H minimizing the linearized cross-product
    residual sum ||d_i x (H [u_i, v_i, 1]^T)||^2, solved by SVD. H^{-1} is then
    split into intrinsics and rotation (RQ-style), skew is zeroed, and
    t = -R @ center.
    """
    h, w = rm.shape
    if pixel_grid is None:
        pixel_grid = pixel_center_grid(h, w)

    valid = rm.valid.ravel()
    if int(valid.sum()) < 6:
        raise InsufficientDataError(f"need >= 6 valid pixels, got {int(valid.sum())}")

    origins = canonicalize_homogeneous(rm.origins.reshape(-1, 4)[valid])
    endpoints = canonicalize_homogeneous(rm.endpoints.reshape(-1, 4)[valid])
    center = dehomogenize(origins, w_eps).mean(axis=0)
    pts = dehomogenize(endpoints, w_eps)

    dirs = pts - center
    norms = np.linalg.norm(dirs, axis=-1)
    keep = norms > 1e-12
    if int(keep.sum()) < 6:
        raise InsufficientDataError("fewer than 6 pixels with usable ray directions")
    dirs = dirs[keep] / norms[keep, None]
    uv = pixel_grid.reshape(-1, 2)[valid][keep]

    # Hartley-style conditioning of pixel coordinates.
    mean_uv = uv.mean(axis=0)
    spread = np.sqrt(np.mean(np.sum((uv - mean_uv) ** 2, axis=-1)))
    s = np.sqrt(2.0) / spread if spread > 0 else 1.0
    T = np.array([[s, 0.0, -s * mean_uv[0]], [0.0, s, -s * mean_uv[1]], [0.0, 0.0, 1.0]])
    un = np.concatenate([(uv - mean_uv) * s, np.ones((len(uv), 1))], axis=-1)

    # Stack d_i x (H u_i) = 0 as rows linear in vec(H) = [h1; h2; h3].
    n = len(un)
    zeros = np.zeros((n, 3))
    dx, dy, dz = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    rows = np.concatenate(
        [
            np.concatenate([zeros, -dz * un, dy * un], axis=1),
            np.concatenate([dz * un, zeros, -dx * un], axis=1),
            np.concatenate([-dy * un, dx * un, zeros], axis=1),
        ],
        axis=0,
    )
    _, svals, vt = np.linalg.svd(rows, full_matrices=False)
    if svals[-2] <= max(svals[0], 1.0) * 1e-10:
        raise DegenerateRaysError("constraint matrix is rank-deficient (parallel or planar rays)")
    H = vt[-1].reshape(3, 3) @ T

    # Fix the sign so directions point forward (positive depth).
    forward = np.einsum("ij,ij->i", dirs, (pixel_grid.reshape(-1, 2)[valid][keep] @ H[:, :2].T) + H[:, 2])
    if forward.mean() < 0:
        H = -H

    det = np.linalg.det(H)
    if abs(det) < 1e-15:
        raise DegenerateRaysError("aligning homography is singular")
    M = np.linalg.inv(H)  # proportional to K @ R

    K, R = scipy.linalg.rq(M)
    signs = np.sign(np.diag(K))
    signs[signs == 0] = 1.0
    K = K * signs[None, :]
    R = R * signs[:, None]
    if np.linalg.det(R) < 0:
        raise DegenerateRaysError("recovered rotation is a reflection")
    K = K / K[2, 2]

    fx, fy = K[0, 0], K[1, 1]
    cx, cy = K[0, 2], K[1, 2]
    if fx <= 0 or fy <= 0:
        raise DegenerateRaysError("recovered focal lengths are not positive")
    t = -R @ center
    return PinholeCamera(fx=fx, fy=fy, cx=cx, cy=cy, R=R, t=t)
