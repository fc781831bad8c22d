"""Sparse voxel grid container and topology/feature operations.

A grid stores the active voxels of one pyramid level as an (N, 3) integer
coordinate list in canonical z-major order plus a channel-major (10, N)
feature block: point offset (3), normal (3), color (3), surface mask (1).
All operations are pure; grids are immutable after construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EmptyResult,
    LevelOverflow,
    OddResolution,
    OutOfBounds,
    TopologyMismatch,
)

N_CHANNELS = 10
OFFSET = slice(0, 3)
NORMAL = slice(3, 6)
COLOR = slice(6, 9)
MASK = 9

# QEM regularization weight per child sample and the condition-number cutoff
# past which the solve falls back to the plain centroid.
QEM_EPSILON = 1e-3
QEM_COND_LIMIT = 1e6

FLOOD_MAX_SWEEPS = 64

_SVG1_MAGIC = b"SVG1"


def _as_resolution(resolution) -> tuple[int, int, int]:
    res = tuple(int(r) for r in np.atleast_1d(resolution).ravel())
    if len(res) == 1:
        res = res * 3
    if len(res) != 3 or any(r <= 0 for r in res):
        raise ValueError(f"resolution must be 3 positive ints, got {resolution}")
    return res


def linear_keys(coords: np.ndarray, resolution) -> np.ndarray:
    """z-major linear index of each coordinate (the canonical sort key)."""
    rx, ry, _ = _as_resolution(resolution)
    c = coords.astype(np.int64)
    return (c[:, 2] * ry + c[:, 1]) * rx + c[:, 0]


@dataclass(frozen=True)
class VoxelBox:
    """Half-open [min_corner, max_corner) box in a level's index space."""

    min_corner: tuple[int, int, int]
    max_corner: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min_corner)
        hi = tuple(int(v) for v in self.max_corner)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo}..{hi}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.min_corner, self.max_corner))

    def contains(self, coords: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.min_corner)
        hi = np.asarray(self.max_corner)
        return np.all((coords >= lo) & (coords < hi), axis=1)

    def check_inside(self, resolution) -> None:
        res = _as_resolution(resolution)
        if any(l < 0 for l in self.min_corner) or any(
            h > r for h, r in zip(self.max_corner, res)
        ):
            raise OutOfBounds(f"box {self.min_corner}..{self.max_corner} outside {res}")

    def translated(self, origin) -> "VoxelBox":
        origin = tuple(int(v) for v in origin)
        ext = self.extents
        return VoxelBox(origin, tuple(o + e for o, e in zip(origin, ext)))


@dataclass(frozen=True)
class SparseGrid:
    """Level-tagged set of active voxels with per-voxel feature channels."""

    level: int
    resolution: tuple[int, int, int]
    coords: np.ndarray  # (N, 3) int32, canonical z-major order
    features: np.ndarray  # (10, N), channel-major
    voxel_size: tuple[float, float, float]
    _index_map: dict | None = field(
        default=None, repr=False, compare=False, hash=False
    )

    def __post_init__(self):
        object.__setattr__(self, "resolution", _as_resolution(self.resolution))
        vs = np.broadcast_to(np.atleast_1d(self.voxel_size).astype(float), (3,))
        object.__setattr__(self, "voxel_size", tuple(vs.tolist()))
        coords = np.ascontiguousarray(self.coords, dtype=np.int32).reshape(-1, 3)
        feats = np.ascontiguousarray(self.features).reshape(N_CHANNELS, -1)
        if feats.shape[1] != coords.shape[0]:
            raise ValueError("features.len != coords.len")
        if coords.shape[0]:
            if coords.min() < 0 or np.any(coords >= np.asarray(self.resolution)):
                raise ValueError("coordinate outside resolution")
            keys = linear_keys(coords, self.resolution)
            if np.any(np.diff(keys) <= 0):
                raise ValueError("coords not unique in canonical z-major order")
        coords.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)

    @staticmethod
    def create(level, resolution, coords, features, voxel_size) -> "SparseGrid":
        """Build a grid, canonicalizing coordinate order."""
        coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
        features = np.asarray(features).reshape(N_CHANNELS, -1)
        resolution = _as_resolution(resolution)
        if coords.shape[0]:
            order = np.argsort(linear_keys(coords, resolution), kind="stable")
            coords = coords[order]
            features = features[:, order]
        return SparseGrid(level, resolution, coords, features, voxel_size)

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    def keys(self) -> np.ndarray:
        return linear_keys(self.coords, self.resolution)

    def index_map(self) -> dict:
        """O(1) expected-time coordinate-key -> row index map (lazy)."""
        if self._index_map is None:
            keys = self.keys()
            object.__setattr__(
                self, "_index_map", dict(zip(keys.tolist(), range(len(keys))))
            )
        return self._index_map

    def index_of(self, coord) -> int:
        """Row index of a coordinate triple, or -1 if inactive."""
        key = linear_keys(np.asarray(coord).reshape(1, 3), self.resolution)[0]
        return self.index_map().get(int(key), -1)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Vectorized membership: row index per query coord, -1 if absent."""
        coords = np.asarray(coords).reshape(-1, 3)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if self.num_voxels == 0:
            return out
        inb = np.all((coords >= 0) & (coords < np.asarray(self.resolution)), axis=1)
        if not inb.any():
            return out
        keys = self.keys()
        q = linear_keys(coords[inb], self.resolution)
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        out[inb] = np.where(keys[pos] == q, pos, -1)
        return out

    def voxel_centers(self) -> np.ndarray:
        """World-space voxel centers; the grid is centered on the origin."""
        res = np.asarray(self.resolution, dtype=np.float64)
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        return (self.coords.astype(np.float64) + 0.5 - res / 2.0) * vs

    def world_points(self) -> np.ndarray:
        """World-space point samples: center + offset * voxel_size."""
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        return self.voxel_centers() + self.features[OFFSET].T.astype(np.float64) * vs

    def with_features(self, features: np.ndarray) -> "SparseGrid":
        return replace(self, features=np.asarray(features), _index_map=None)


def full_grid(level, resolution, voxel_size, fill=0.0) -> SparseGrid:
    """Dense grid over the whole resolution box with constant features."""
    rx, ry, rz = _as_resolution(resolution)
    z, y, x = np.meshgrid(
        np.arange(rz), np.arange(ry), np.arange(rx), indexing="ij"
    )
    coords = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1).astype(np.int32)
    feats = np.full((N_CHANNELS, coords.shape[0]), fill, dtype=np.float32)
    return SparseGrid(level, (rx, ry, rz), coords, feats, voxel_size)


# ---------------------------------------------------------------------------
# pooling


def _child_groups(fine: SparseGrid):
    """Group fine voxels by parent; returns (parent coords, inverse, counts)."""
    if any(r % 2 for r in fine.resolution):
        raise OddResolution(f"resolution {fine.resolution} not even")
    parents = fine.coords // 2
    coarse_res = tuple(r // 2 for r in fine.resolution)
    pkeys = linear_keys(parents, coarse_res)
    uniq, inverse, counts = np.unique(pkeys, return_inverse=True, return_counts=True)
    rx, ry, _ = coarse_res
    px = uniq % rx
    py = (uniq // rx) % ry
    pz = uniq // (rx * ry)
    pcoords = np.stack([px, py, pz], axis=1).astype(np.int32)
    return pcoords, coarse_res, inverse, counts


def avg_pool(fine: SparseGrid) -> SparseGrid:
    """2x2x2 pooling: mean normal/color (normal re-unit), max mask.

    The offset channel is filled with the clamped plain centroid of the
    child points; qem_pool replaces it when sharp features must survive.
    """
    pcoords, coarse_res, inverse, counts = _child_groups(fine)
    m = len(counts)
    csize = tuple(2.0 * v for v in fine.voxel_size)

    sums = np.zeros((N_CHANNELS, m), dtype=np.float64)
    np.add.at(sums.T, inverse, fine.features.T.astype(np.float64))
    mean = sums / counts

    normals = mean[NORMAL].T
    norms = np.linalg.norm(normals, axis=1)
    degenerate = norms < 1e-12
    if degenerate.any():
        # zero-vector mean: fall back to the first child's normal
        first_child = np.full(m, fine.num_voxels, dtype=np.int64)
        np.minimum.at(first_child, inverse, np.arange(fine.num_voxels))
        normals[degenerate] = fine.features[NORMAL].T[first_child[degenerate]]
        norms = np.linalg.norm(normals, axis=1)
        norms[norms < 1e-12] = 1.0
    normals = normals / norms[:, None]

    mask = np.full(m, -np.inf)
    np.maximum.at(mask, inverse, fine.features[MASK].astype(np.float64))

    centroid = _child_centroids(fine, pcoords, inverse, counts)
    offsets = _world_to_offset(centroid, pcoords, coarse_res, csize)

    feats = np.empty((N_CHANNELS, m), dtype=fine.features.dtype)
    feats[OFFSET] = offsets.T
    feats[NORMAL] = normals.T
    feats[COLOR] = mean[COLOR]
    feats[MASK] = mask
    return SparseGrid(fine.level - 1, coarse_res, pcoords, feats, csize)


def _child_centroids(fine, pcoords, inverse, counts):
    pts = fine.world_points()
    acc = np.zeros((len(counts), 3), dtype=np.float64)
    np.add.at(acc, inverse, pts)
    return acc / counts[:, None]


def _world_to_offset(points, pcoords, coarse_res, csize):
    res = np.asarray(coarse_res, dtype=np.float64)
    vs = np.asarray(csize, dtype=np.float64)
    centers = (pcoords.astype(np.float64) + 0.5 - res / 2.0) * vs
    return np.clip((points - centers) / vs, -0.5, 0.5)


def qem_pool(fine: SparseGrid, coarse_topology: SparseGrid) -> np.ndarray:
    """Quadric-error-minimizing coarse offsets for the pooled topology.

    Per coarse voxel, minimizes sum over children of (n_i . (x - p_i))^2
    plus eps*|x - centroid|^2 with eps = QEM_EPSILON * child count, then
    clamps x to the coarse voxel cube. Returns (3, M) offsets aligned with
    coarse_topology's canonical order.
    """
    pcoords, coarse_res, inverse, counts = _child_groups(fine)
    if coarse_res != coarse_topology.resolution or not np.array_equal(
        pcoords, coarse_topology.coords
    ):
        raise TopologyMismatch("coarse_topology is not the pooled topology of fine")
    m = len(counts)
    csize = tuple(2.0 * v for v in fine.voxel_size)

    pts = fine.world_points()
    nrm = fine.features[NORMAL].T.astype(np.float64)
    outer = nrm[:, :, None] * nrm[:, None, :]  # (N, 3, 3)
    rhs = np.einsum("nij,nj->ni", outer, pts)

    A = np.zeros((m, 3, 3), dtype=np.float64)
    b = np.zeros((m, 3), dtype=np.float64)
    np.add.at(A, inverse, outer)
    np.add.at(b, inverse, rhs)

    centroid = _child_centroids(fine, pcoords, inverse, counts)
    eps = QEM_EPSILON * counts.astype(np.float64)
    A += eps[:, None, None] * np.eye(3)
    b += eps[:, None] * centroid

    with np.errstate(all="ignore"):
        cond = np.linalg.cond(A)
        x = np.linalg.solve(A, b[:, :, None])[:, :, 0]
    bad = ~np.isfinite(x).all(axis=1) | (cond > QEM_COND_LIMIT)
    if bad.any():
        x[bad] = centroid[bad]

    # clamp to the closed coarse cube before converting to an offset
    res = np.asarray(coarse_res, dtype=np.float64)
    vs = np.asarray(csize, dtype=np.float64)
    centers = (pcoords.astype(np.float64) + 0.5 - res / 2.0) * vs
    x = np.clip(x, centers - vs / 2.0, centers + vs / 2.0)
    return np.clip((x - centers) / vs, -0.5, 0.5).T


def pool_level(fine: SparseGrid, qem: bool = True) -> SparseGrid:
    """One pyramid pooling step: avg_pool plus (optionally) QEM offsets."""
    coarse = avg_pool(fine)
    if qem:
        offsets = qem_pool(fine, coarse)
        feats = coarse.features.copy()
        feats[OFFSET] = offsets.astype(feats.dtype)
        coarse = coarse.with_features(feats)
    return coarse


# ---------------------------------------------------------------------------
# subdivision / pruning / flooding

_CHILD_DELTA = np.array(
    [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.int32
)


def subdivide(coarse: SparseGrid, max_level: int | None = None) -> SparseGrid:
    """Spawn the 8 children of every active voxel with seed features.

    Child offsets preserve the parent world point where representable:
    2*parent_offset - corner, clamped to [-0.5, 0.5].
    """
    if max_level is not None and coarse.level >= max_level:
        raise LevelOverflow(f"cannot subdivide level {coarse.level} (L={max_level})")
    child_coords = (coarse.coords[:, None, :] * 2 + _CHILD_DELTA[None, :, :]).reshape(
        -1, 3
    )
    corners = (_CHILD_DELTA.astype(np.float64) - 0.5)[None, :, :]  # in {-0.5, +0.5}
    parent_off = coarse.features[OFFSET].T.astype(np.float64)[:, None, :]
    child_off = np.clip(2.0 * parent_off - corners, -0.5, 0.5).reshape(-1, 3)

    # repeat along the voxel axis keeps child blocks contiguous per parent
    feats = np.repeat(coarse.features[:, :, None], 8, axis=2).reshape(N_CHANNELS, -1)
    feats = feats.copy()
    feats[OFFSET] = child_off.T
    fine_res = tuple(2 * r for r in coarse.resolution)
    fsize = tuple(v / 2.0 for v in coarse.voxel_size)
    return SparseGrid.create(coarse.level + 1, fine_res, child_coords, feats, fsize)


def prune(grid: SparseGrid) -> SparseGrid:
    """Keep only voxels with mask >= 0."""
    keep = grid.features[MASK] >= 0
    if not keep.any():
        raise EmptyResult("no voxel survives pruning")
    return SparseGrid(
        grid.level,
        grid.resolution,
        grid.coords[keep],
        grid.features[:, keep],
        grid.voxel_size,
    )


def flood(target_topology: SparseGrid, source: SparseGrid) -> SparseGrid:
    """Fill target-only (ghost) voxels with blurred source features, mask -1.

    Ghosts average their already-valued 3x3x3 neighbors, Jacobi-style, for
    at most FLOOD_MAX_SWEEPS sweeps; unreached ghosts get the global mean
    of the source features.
    """
    if source.level != target_topology.level:
        raise TopologyMismatch("flood levels differ")
    src_rows = target_topology.lookup(source.coords)
    if np.any(src_rows < 0):
        raise TopologyMismatch("source has a coord absent from target")

    n = target_topology.num_voxels
    feats = np.zeros((N_CHANNELS, n), dtype=np.float64)
    valued = np.zeros(n, dtype=bool)
    feats[:, src_rows] = source.features.astype(np.float64)
    valued[src_rows] = True

    if not valued.all():
        table = gather_neighborhood(target_topology, 3).table  # (n, 27)
        ghost_exists = True
        for _ in range(FLOOD_MAX_SWEEPS):
            if valued.all():
                ghost_exists = False
                break
            nb = table[~valued]  # (g, 27)
            has = nb >= 0
            val = np.zeros(nb.shape, dtype=bool)
            val[has] = valued[nb[has]]
            cnt = val.sum(axis=1)
            ready = cnt > 0
            if not ready.any():
                break
            safe_nb = np.where(val, nb, 0)
            acc = np.where(val[None], feats[:, safe_nb], 0.0).sum(axis=2)
            ghost_idx = np.flatnonzero(~valued)
            upd = ghost_idx[ready]
            feats[:, upd] = acc[:, ready] / cnt[ready]
            valued[upd] = True
        if ghost_exists and not valued.all():
            feats[:, ~valued] = source.features.astype(np.float64).mean(
                axis=1, keepdims=True
            )

    ghost = np.ones(n, dtype=bool)
    ghost[src_rows] = False
    feats[MASK, ghost] = -1.0
    return target_topology.with_features(feats.astype(source.features.dtype))


# ---------------------------------------------------------------------------
# cropping / pasting / neighborhoods


def crop(grid: SparseGrid, box: VoxelBox) -> SparseGrid:
    """Active voxels inside box, re-based to the box origin."""
    box.check_inside(grid.resolution)
    inside = box.contains(grid.coords)
    coords = grid.coords[inside] - np.asarray(box.min_corner, dtype=np.int32)
    return SparseGrid(
        grid.level, box.extents, coords, grid.features[:, inside], grid.voxel_size
    )


def paste(grid: SparseGrid, src: VoxelBox, dst_origin) -> SparseGrid:
    """Replace the destination box content with the translated source box."""
    src.check_inside(grid.resolution)
    dst = src.translated(dst_origin)
    dst.check_inside(grid.resolution)

    shift = np.asarray(dst_origin, dtype=np.int32) - np.asarray(
        src.min_corner, dtype=np.int32
    )
    in_src = src.contains(grid.coords)
    in_dst = dst.contains(grid.coords)

    keep_coords = grid.coords[~in_dst]
    keep_feats = grid.features[:, ~in_dst]
    moved_coords = grid.coords[in_src] + shift
    moved_feats = grid.features[:, in_src]

    coords = np.concatenate([keep_coords, moved_coords], axis=0)
    feats = np.concatenate([keep_feats, moved_feats], axis=1)
    return SparseGrid.create(grid.level, grid.resolution, coords, feats, grid.voxel_size)


def tap_offsets(extent: int) -> np.ndarray:
    """Kernel tap offsets (K, 3) as (dx, dy, dz), z-major enumeration.

    Enumeration is symmetric: offsets[K-1-k] == -offsets[k], which the
    convolution backward pass relies on.
    """
    r = extent // 2
    rng = range(-r, r + 1)
    return np.array(
        [[dx, dy, dz] for dz in rng for dy in rng for dx in rng], dtype=np.int32
    )


@dataclass(frozen=True)
class NeighborTable:
    """Active-neighbor row index per (voxel, kernel tap); -1 when absent."""

    extent: int
    offsets: np.ndarray  # (K, 3)
    table: np.ndarray  # (N, K) int32, -1 for missing neighbors

    def pairs(self, row: int):
        """(kernel-offset, neighbor-index) pairs for one voxel."""
        idx = self.table[row]
        return [
            (tuple(self.offsets[k]), int(idx[k]))
            for k in range(len(idx))
            if idx[k] >= 0
        ]


def gather_neighborhood(grid: SparseGrid, kernel_extent: int) -> NeighborTable:
    """Neighbor index table for sparse convolution (zero-padding contract)."""
    if kernel_extent not in (1, 3):
        raise ValueError(f"kernel_extent must be 1 or 3, got {kernel_extent}")
    offs = tap_offsets(kernel_extent)
    n = grid.num_voxels
    k = offs.shape[0]
    out = np.full((n, k), -1, dtype=np.int32)
    if n == 0:
        return NeighborTable(kernel_extent, offs, out)
    keys = grid.keys()
    res = np.asarray(grid.resolution)
    for j, d in enumerate(offs):
        if not d.any():
            out[:, j] = np.arange(n, dtype=np.int32)
            continue
        cand = grid.coords + d
        inb = np.all((cand >= 0) & (cand < res), axis=1)
        if not inb.any():
            continue
        q = linear_keys(cand[inb], grid.resolution)
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, n - 1)
        hit = keys[pos] == q
        col = np.full(inb.sum(), -1, dtype=np.int32)
        col[hit] = pos[hit].astype(np.int32)
        out[inb, j] = col
    return NeighborTable(kernel_extent, offs, out)


# ---------------------------------------------------------------------------
# binary .svg1 format


def save_grid(path, grid: SparseGrid) -> None:
    """Write the .svg1 binary format (little-endian)."""
    with open(path, "wb") as f:
        f.write(_SVG1_MAGIC)
        f.write(struct.pack("<I", grid.level))
        f.write(struct.pack("<3I", *grid.resolution))
        f.write(struct.pack("<Q", grid.num_voxels))
        f.write(np.ascontiguousarray(grid.coords, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(grid.features, dtype="<f4").tobytes())


def load_grid(path, voxel_size=None) -> SparseGrid:
    """Read a .svg1 file; voxel_size defaults to a centered [-1,1] domain."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _SVG1_MAGIC:
            raise ValueError(f"not an svg1 file: {path}")
        level = struct.unpack("<I", f.read(4))[0]
        resolution = struct.unpack("<3I", f.read(12))
        n = struct.unpack("<Q", f.read(8))[0]
        coords = np.frombuffer(f.read(12 * n), dtype="<i4").reshape(n, 3)
        feats = np.frombuffer(f.read(40 * n), dtype="<f4").reshape(N_CHANNELS, n)
    if voxel_size is None:
        voxel_size = (2.0 / max(resolution),) * 3
    return SparseGrid(level, resolution, coords.copy(), feats.copy(), voxel_size)
