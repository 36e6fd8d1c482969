"""Deterministic image fixtures shared by the test modules."""
import numpy as np
from scipy import ndimage


def smooth_field(size, seed, sigma=2.0):
    """Band-limited random texture rescaled to [0, 1]; stands in for a natural image."""
    h, w = (size, size) if np.isscalar(size) else size
    x = ndimage.gaussian_filter(np.random.default_rng(seed).random((h, w)), sigma)
    return (x - x.min()) / (x.max() - x.min())


def fixture_triple(size=32, seed=0):
    """(a, b, fused) with distinct structure in a and b and an imperfect fused image."""
    a = smooth_field(size, seed)
    b = smooth_field(size, seed + 1, sigma=3.0)
    rng = np.random.default_rng(seed + 2)
    fused = np.clip(0.6 * a + 0.4 * b + 0.02 * rng.standard_normal(a.shape), 0, 1)
    return a, b, fused


def checkerboard(size=16, cell=1):
    idx = np.indices((size, size)) // cell
    return (idx.sum(axis=0) % 2).astype(float)
