import numpy as np
import pytest

from skillet import spatial
from skillet.geometry import PointCloud


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # compile the numba kernels once up front so timings in tests are honest
    spatial.warmup()


def random_cloud(rng, n, scale=0.1, frame="base"):
    return PointCloud(rng.uniform(-scale, scale, (n, 3)), frame)


def anisotropic_cloud(rng, n=256, frame="base"):
    """Elongated, asymmetric blob: well-defined PCA yaw, no pi symmetry."""
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * np.array([0.12, 0.03, 0.015])
    lump = rng.normal(0.0, 0.01, (n // 4, 3)) + np.array([0.09, 0.025, 0.0])
    pts[: n // 4] = lump
    return PointCloud(pts, frame)


def brute_chamfer(a, b):
    """O(n*m) double-loop oracle for the Chamfer score."""
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return d.min(axis=1).mean() + d.min(axis=0).mean()
