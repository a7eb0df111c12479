"""Pose and geometry metrics: relative rotation accuracy, similarity-aligned
camera center accuracy, and Chamfer distance over individually normalized
point clouds."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateConfigurationError, InvalidInputError
from .geometry import PinholeCamera, camera_center


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle in degrees between two rotation matrices."""
    cos = 0.5 * (np.trace(Ra @ Rb.T) - 1.0)
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def relative_rotation_angles(pred: list[PinholeCamera], gt: list[PinholeCamera]) -> np.ndarray:
    """Angles of predicted-vs-GT relative rotation over all ordered pairs i != j."""
    if len(pred) != len(gt):
        raise InvalidInputError(f"pose sets differ in length: {len(pred)} vs {len(gt)}")
    n = len(pred)
    if n < 2:
        raise InvalidInputError("need at least 2 cameras")
    angles = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            rel_pred = pred[j].R @ pred[i].R.T
            rel_gt = gt[j].R @ gt[i].R.T
            angles.append(rotation_angle_deg(rel_pred, rel_gt))
    return np.array(angles)


def rotation_accuracy(pred: list[PinholeCamera], gt: list[PinholeCamera], thresh_deg: float = 15.0) -> float:
    """Fraction of relative camera rotations within thresh_deg of ground truth."""
    angles = relative_rotation_angles(pred, gt)
    return float(np.mean(angles < thresh_deg))


def umeyama_align(X: np.ndarray, Y: np.ndarray):
    """Optimal similarity transform (s, R, t) minimizing sum ||s R x + t - y||^2.

    Closed form via SVD of the cross-covariance with the determinant-sign
    correction; s > 0. X and Y are (N, 3) with N >= 3.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[0] < 3:
        raise InvalidInputError(f"need matching (N>=3, d) point sets, got {X.shape} and {Y.shape}")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    xc, yc = X - mx, Y - my
    var_x = np.mean(np.sum(xc * xc, axis=1))
    if var_x < 1e-24:
        raise DegenerateConfigurationError("source points are all identical")

    cov = yc.T @ xc / len(X)
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(X.shape[1])
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[-1, -1] = -1.0
    R = U @ S @ Vt
    s = float(np.sum(d * np.diag(S)) / var_x)
    if s <= 0:
        raise DegenerateConfigurationError("optimal scale is not positive")
    t = my - s * R @ mx
    return s, R, t


def center_accuracy(pred: list[PinholeCamera], gt: list[PinholeCamera], thresh: float = 0.1) -> float:
    """Fraction of similarity-aligned predicted centers within thresh * scene scale.

    Scene scale is the largest GT-center distance from the GT-center centroid.
    For N=2 a similarity transform matches both centers exactly, so the result
    is 1.0 by construction.
    """
    if len(pred) != len(gt):
        raise InvalidInputError(f"pose sets differ in length: {len(pred)} vs {len(gt)}")
    n = len(pred)
    if n < 2:
        raise InvalidInputError("need at least 2 cameras")
    if n == 2:
        return 1.0
    cp = np.stack([camera_center(c) for c in pred])
    cg = np.stack([camera_center(c) for c in gt])
    s, R, t = umeyama_align(cp, cg)
    aligned = cp @ (s * R).T + t
    scale = float(np.max(np.linalg.norm(cg - cg.mean(axis=0), axis=1)))
    err = np.linalg.norm(aligned - cg, axis=1)
    return float(np.mean(err < thresh * scale))


def normalize_cloud(P: np.ndarray) -> np.ndarray:
    """Scale points so the mean distance from the origin is 1 (no translation)."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or len(P) < 1:
        raise InvalidInputError(f"need an (N>=1, d) cloud, got {P.shape}")
    mean_norm = float(np.mean(np.linalg.norm(P, axis=1)))
    if mean_norm <= 0:
        raise DegenerateConfigurationError("cannot normalize a cloud at the origin")
    return P / mean_norm


def chamfer(A: np.ndarray, B: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor Euclidean distance (unsquared), brute force."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if len(A) == 0 or len(B) == 0:
        raise InvalidInputError("chamfer needs two non-empty clouds")
    d = cdist(A, B)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 3, 3) rotations uniform over SO(3), via normalized quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (y * y + x * x)
    return R


def random_rotation_baseline(thresh_deg: float = 15.0, n_draws: int = 1_000_000, seed: int = 0) -> float:
    """Monte Carlo fraction of uniform random relative rotations within threshold."""
    rng = np.random.default_rng(seed)
    R = random_rotations(n_draws, rng)
    cos = np.clip(0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0), -1.0, 1.0)
    return float(np.mean(np.degrees(np.arccos(cos)) < thresh_deg))


@dataclass
class MetricReport:
    rotation_accuracy: float
    center_accuracy: float
    chamfer: float
    chamfer_fg: float | None = None
    rotation_thresh_deg: float = 15.0
    center_thresh: float = 0.1
    record_id: str | None = None

    def __post_init__(self):
        if not (0.0 <= self.rotation_accuracy <= 1.0 and 0.0 <= self.center_accuracy <= 1.0):
            raise InvalidInputError("accuracy fractions must lie in [0, 1]")

    def to_json(self) -> str:
        obj = {
            "record_id": self.record_id,
            "rotation_accuracy": self.rotation_accuracy,
            "center_accuracy": self.center_accuracy,
            "chamfer": self.chamfer,
            "chamfer_fg": self.chamfer_fg,
            "rotation_thresh_deg": self.rotation_thresh_deg,
            "center_thresh": self.center_thresh,
        }
        return json.dumps(obj, sort_keys=True)
