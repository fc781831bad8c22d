"""Desk-scale evaluation: occupancy voxelization, pairwise diversity, chamfer.

Outputs are voxelized from point sets, so the IoU here is surface-shell
IoU, not solid IoU; numbers are comparable between runs of this engine
but not directly to solid-voxelization scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, ResolutionMismatch


@dataclass(frozen=True)
class OccupancyGrid:
    resolution: tuple[int, int, int]
    bits: np.ndarray  # flat bool array, z-major

    def __post_init__(self):
        res = tuple(int(r) for r in np.broadcast_to(np.atleast_1d(self.resolution), (3,)))
        object.__setattr__(self, "resolution", res)
        bits = np.asarray(self.bits, dtype=bool).reshape(-1)
        if bits.size != res[0] * res[1] * res[2]:
            raise ValueError("bitset length must equal the cell count")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def occupied(self) -> int:
        return int(self.bits.sum())


def voxelize_points(points: np.ndarray, resolution) -> OccupancyGrid:
    """Occupancy over [-1, 1]^3: a cell is occupied iff it holds a point."""
    res = np.broadcast_to(np.atleast_1d(resolution), (3,)).astype(int)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bits = np.zeros(int(res.prod()), dtype=bool)
    if len(points):
        idx = np.floor((points + 1.0) / 2.0 * res).astype(np.int64)
        idx = np.clip(idx, 0, res - 1)
        flat = (idx[:, 2] * res[1] + idx[:, 1]) * res[0] + idx[:, 0]
        bits[flat] = True
    return OccupancyGrid(tuple(res), bits)


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if a.resolution != b.resolution:
        raise ResolutionMismatch(f"{a.resolution} vs {b.resolution}")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0  # two empty grids are identical
    inter = np.logical_and(a.bits, b.bits).sum()
    return float(inter / union)


def pairwise_diversity(samples: list[OccupancyGrid]) -> float:
    """Mean (1 - IoU) over unordered pairs of samples."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    dists = []
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            dists.append(1.0 - iou(samples[i], samples[j]))
    return float(np.mean(dists))


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("chamfer needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float((d_ab.mean() + d_ba.mean()) / 2.0)
