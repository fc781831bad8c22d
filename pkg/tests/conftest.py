import numpy as np
import pytest

from voxgen.grid import MASK, N_CHANNELS, SparseGrid


def make_grid(coords, level=2, resolution=8, voxel_size=None, features=None, rng=None):
    """Small-grid builder for tests; random but unit-normal features."""
    coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
    n = coords.shape[0]
    if voxel_size is None:
        res = np.atleast_1d(resolution)
        voxel_size = 2.0 / float(np.max(res))
    if features is None:
        rng = rng or np.random.default_rng(0)
        features = rng.standard_normal((N_CHANNELS, n))
        nrm = features[3:6]
        features[3:6] = nrm / np.maximum(np.linalg.norm(nrm, axis=0), 1e-9)
        features[0:3] = np.clip(features[0:3] * 0.2, -0.5, 0.5)
        features[MASK] = 1.0
    return SparseGrid.create(level, resolution, coords, features, voxel_size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
