"""Band-limited synthetic volumes for smoke tests and demos."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume_io import Volume, normalize


def synthetic_volume(shape=(64, 64, 64), seed=0, n_waves=6, n_blobs=12, vid=None):
    """Sum of random 3D sinusoids and Gaussian-smoothed random blobs, min-max normalized."""
    rng = np.random.default_rng(seed)
    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    vol = np.zeros(shape)
    for _ in range(n_waves):
        k = rng.uniform(0.05, 0.45, size=3) * rng.choice([-1, 1], size=3)
        vol += rng.uniform(0.2, 1.0) * np.sin(k[0] * z + k[1] * y + k[2] * x + rng.uniform(0, 2 * np.pi))
    blobs = np.zeros(shape)
    for _ in range(n_blobs):
        c = [int(rng.integers(0, n)) for n in shape]
        blobs[tuple(c)] = rng.uniform(-1, 1) * 400
    vol += gaussian_filter(blobs, sigma=rng.uniform(1.5, 3.0))
    return normalize(Volume(vol, (1.0, 1.0, 1.0), id=vid or f"synthetic-{seed}"))


def synthetic_corpus(n=8, shape=(64, 64, 64), seed=0):
    return [synthetic_volume(shape, seed=seed * 1000 + i, vid=f"synthetic-{seed}-{i}") for i in range(n)]
