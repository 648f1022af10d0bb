import numpy as np
import pytest


def y_cloud(seed, n=600, noise=0.08, length=2.0):
    """Three noisy arms radiating from the origin in 2D."""
    rng = np.random.default_rng(seed)
    dirs = np.array([[0.0, 1.0], [-0.866, -0.5], [0.866, -0.5]])
    arm = rng.integers(0, 3, size=n)
    t = rng.random(n)
    pts = t[:, None] * dirs[arm] * length
    return pts + noise * rng.normal(size=(n, 2))


def segment_cloud(seed, n=300, noise=0.0, dims=3):
    """Points on (or near) a straight segment embedded in ``dims`` dims."""
    rng = np.random.default_rng(seed)
    direction = np.zeros(dims)
    direction[0] = 1.0
    t = np.linspace(-2.0, 2.0, n)
    pts = t[:, None] * direction
    if noise:
        pts = pts + noise * rng.normal(size=(n, dims))
    return pts


@pytest.fixture
def rng():
    return np.random.default_rng(0)
