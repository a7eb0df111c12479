import numpy as np
import pytest

from raysfm.geometry import DepthMap, PinholeCamera


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via a normalized quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (y * y + x * x)],
        ]
    )


def random_camera(rng: np.random.Generator, center_radius: float = 3.0) -> PinholeCamera:
    R = random_rotation(rng)
    center = rng.uniform(-1, 1, 3)
    center *= center_radius / max(np.linalg.norm(center), 1e-6)
    return PinholeCamera(
        fx=rng.uniform(30, 120),
        fy=rng.uniform(30, 120),
        cx=rng.uniform(8, 24),
        cy=rng.uniform(8, 24),
        R=R,
        t=-R @ center,
    )


def random_depth_map(rng: np.random.Generator, h: int = 16, w: int = 16, valid_frac: float = 1.0) -> DepthMap:
    depth = rng.uniform(0.5, 5.0, (h, w))
    valid = rng.uniform(size=(h, w)) < valid_frac
    return DepthMap(depth=depth, valid=valid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
