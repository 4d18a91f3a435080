import numpy as np
import pytest

from ecnr import Volume4D


def moving_gaussians(dims, n_blobs=3, seed=0):
    """Smooth synthetic volume: a sum of Gaussians drifting over time."""
    x, y, z, t = dims
    rng = np.random.default_rng(seed)
    gx, gy, gz = np.meshgrid(
        np.linspace(0, 1, x), np.linspace(0, 1, y), np.linspace(0, 1, z), indexing="ij"
    )
    centers = rng.uniform(0.25, 0.75, (n_blobs, 3))
    drift = rng.uniform(-0.2, 0.2, (n_blobs, 3))
    widths = rng.uniform(0.01, 0.03, n_blobs)
    frames = []
    for ti in range(t):
        ph = ti / max(t - 1, 1)
        f = np.zeros((x, y, z))
        for b in range(n_blobs):
            cx, cy, cz = centers[b] + ph * drift[b]
            f += np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2 + (gz - cz) ** 2) / widths[b])
        frames.append(f.T)  # (z, y, x)
    data = np.stack(frames)
    # store at float32 precision, like data read from a raw file
    return Volume4D(data.astype(np.float32).astype(np.float64))


def random_volume(dims, seed=0, lo=-1.0, hi=1.0):
    """Uniform random volume at float32 precision."""
    x, y, z, t = dims
    rng = np.random.default_rng(seed)
    data = rng.uniform(lo, hi, (t, z, y, x)).astype(np.float32).astype(np.float64)
    return Volume4D(data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
