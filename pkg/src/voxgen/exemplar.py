"""Mesh ingestion and ground-truth pyramid extraction.

The finest level is built by conservatively voxelizing the surface
(AABB cull + separating-axis triangle/box test), projecting each marked
voxel center onto its globally nearest surface point through a BVH, and
pooling down to the coarsest resolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyMesh, IndivisibleResolution, NoSurfaceVoxels
from .grid import (
    COLOR,
    MASK,
    N_CHANNELS,
    NORMAL,
    OFFSET,
    SparseGrid,
    linear_keys,
    pool_level,
)

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
NORMALIZE_MARGIN = 0.95  # longest axis spans [-margin, margin]


@dataclass(frozen=True)
class WorldTransform:
    """Uniform scale then translation: world -> normalized domain."""

    scale: float
    translation: tuple[float, float, float]

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + np.asarray(self.translation)

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - np.asarray(self.translation)) / self.scale

    @staticmethod
    def identity() -> "WorldTransform":
        return WorldTransform(1.0, (0.0, 0.0, 0.0))


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int32
    vertex_colors: np.ndarray | None = None  # (V, 3) in [0, 1]
    vertex_normals: np.ndarray | None = None  # (V, 3) unit
    face_normals: np.ndarray | None = None  # derived on load
    dropped_degenerate: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle index out of range")
        if self.face_normals is None:
            self._drop_degenerate()

    def _drop_degenerate(self):
        v = self.vertices
        t = self.triangles
        if len(t) == 0:
            self.face_normals = np.zeros((0, 3))
            return
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        area2 = np.linalg.norm(cross, axis=1)
        keep = area2 / 2.0 >= DEGENERATE_AREA
        dropped = int((~keep).sum())
        if dropped:
            log.info("dropped %d degenerate triangles", dropped)
        self.triangles = self.triangles[keep]
        self.face_normals = cross[keep] / area2[keep][:, None]
        self.dropped_degenerate = dropped

    def triangle_vertices(self) -> np.ndarray:
        """(T, 3, 3) corner positions."""
        return self.vertices[self.triangles]


# ---------------------------------------------------------------------------
# mesh file io


def load_mesh(path) -> TriangleMesh:
    path = str(path)
    if path.lower().endswith(".obj"):
        return _load_obj(path)
    if path.lower().endswith(".ply"):
        return _load_ply(path)
    raise ValueError(f"unsupported mesh format: {path}")


def _load_obj(path) -> TriangleMesh:
    verts, colors, normals = [], [], []
    vn_of_vertex = {}
    faces = []
    with open(path, "r", errors="replace") as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                verts.append(vals[:3])
                if len(vals) >= 6:
                    colors.append(vals[3:6])
            elif parts[0] == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    vi = int(fields[0])
                    vi = vi - 1 if vi > 0 else len(verts) + vi
                    if len(fields) == 3 and fields[2]:
                        ni = int(fields[2])
                        vn_of_vertex[vi] = ni - 1 if ni > 0 else len(normals) + ni
                    idx.append(vi)
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise EmptyMesh(f"no usable geometry in {path}")
    vertex_normals = None
    if normals and len(vn_of_vertex) == len(verts):
        vertex_normals = np.array([normals[vn_of_vertex[i]] for i in range(len(verts))])
    vertex_colors = np.asarray(colors) if len(colors) == len(verts) else None
    return TriangleMesh(
        np.asarray(verts),
        np.asarray(faces, dtype=np.int32),
        vertex_colors=vertex_colors,
        vertex_normals=vertex_normals,
    )


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _load_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"not a PLY file: {path}")
        fmt = None
        elements = []  # (name, count, [(prop_name, dtype, is_list, count_dtype)])
        while True:
            line = f.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append(
                        (tokens[4], _PLY_TYPES[tokens[3]], True, _PLY_TYPES[tokens[2]])
                    )
                else:
                    elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]], False, None))
            elif tokens[0] == "end_header":
                break
        if fmt == "ascii":
            data = _read_ply_ascii(f, elements)
        elif fmt == "binary_little_endian":
            data = _read_ply_binary(f, elements)
        else:
            raise ValueError(f"unsupported PLY format {fmt}")

    vprops = data.get("vertex")
    faces = data.get("face")
    if vprops is None or faces is None:
        raise EmptyMesh(f"PLY missing vertex or face element: {path}")
    verts = np.stack([vprops["x"], vprops["y"], vprops["z"]], axis=1)
    normals = None
    if all(k in vprops for k in ("nx", "ny", "nz")):
        normals = np.stack([vprops["nx"], vprops["ny"], vprops["nz"]], axis=1)
    colors = None
    if all(k in vprops for k in ("red", "green", "blue")):
        colors = np.stack([vprops["red"], vprops["green"], vprops["blue"]], axis=1)
        if colors.max() > 1.0 + 1e-6:
            colors = colors / 255.0
    tri = []
    key = "vertex_indices" if "vertex_indices" in faces else "vertex_index"
    for poly in faces[key]:
        for k in range(1, len(poly) - 1):
            tri.append([poly[0], poly[k], poly[k + 1]])
    if not len(verts) or not tri:
        raise EmptyMesh(f"no usable geometry in {path}")
    return TriangleMesh(
        verts.astype(np.float64),
        np.asarray(tri, dtype=np.int32),
        vertex_colors=colors,
        vertex_normals=normals,
    )


def _read_ply_ascii(f, elements):
    data = {}
    for name, count, props in elements:
        cols = {p[0]: [] for p in props}
        for _ in range(count):
            tokens = f.readline().split()
            i = 0
            for pname, dtype, is_list, _ in props:
                if is_list:
                    n = int(tokens[i]); i += 1
                    vals = [float(tokens[i + k]) for k in range(n)]
                    i += n
                    cols[pname].append(np.array(vals, dtype=dtype))
                else:
                    cols[pname].append(np.array(tokens[i], dtype=dtype)[()])
                    i += 1
        data[name] = {
            k: (v if v and isinstance(v[0], np.ndarray) else np.array(v))
            for k, v in cols.items()
        }
    return data


def _read_ply_binary(f, elements):
    data = {}
    for name, count, props in elements:
        if not any(p[2] for p in props):
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            arr = np.frombuffer(f.read(dt.itemsize * count), dtype=dt)
            data[name] = {p[0]: arr[p[0]].astype(np.float64) for p in props}
        else:
            cols = {p[0]: [] for p in props}
            for _ in range(count):
                for pname, dtype, is_list, cnt_dtype in props:
                    if is_list:
                        n = int(
                            np.frombuffer(
                                f.read(np.dtype(cnt_dtype).itemsize), "<" + cnt_dtype
                            )[0]
                        )
                        vals = np.frombuffer(
                            f.read(np.dtype(dtype).itemsize * n), "<" + dtype
                        )
                        cols[pname].append(vals)
                    else:
                        cols[pname].append(
                            np.frombuffer(
                                f.read(np.dtype(dtype).itemsize), "<" + dtype
                            )[0]
                        )
            data[name] = {
                k: (v if v and isinstance(v[0], np.ndarray) else np.array(v))
                for k, v in cols.items()
            }
    return data


def save_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as f:
        for i, v in enumerate(mesh.vertices):
            if mesh.vertex_colors is not None:
                c = mesh.vertex_colors[i]
                f.write(f"v {v[0]} {v[1]} {v[2]} {c[0]} {c[1]} {c[2]}\n")
            else:
                f.write(f"v {v[0]} {v[1]} {v[2]}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


# ---------------------------------------------------------------------------
# normalization


def normalize_mesh(mesh: TriangleMesh) -> tuple[TriangleMesh, WorldTransform]:
    """Center the bounding box and scale the longest axis to [-0.95, 0.95]."""
    if len(mesh.vertices) == 0 or len(mesh.triangles) == 0:
        raise EmptyMesh("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise EmptyMesh("mesh has zero extent")
    scale = 2.0 * NORMALIZE_MARGIN / extent
    center = (lo + hi) / 2.0
    transform = WorldTransform(scale, tuple(-center * scale))
    out = TriangleMesh(
        transform.apply(mesh.vertices),
        mesh.triangles.copy(),
        vertex_colors=None if mesh.vertex_colors is None else mesh.vertex_colors.copy(),
        vertex_normals=None if mesh.vertex_normals is None else mesh.vertex_normals.copy(),
        face_normals=mesh.face_normals.copy(),
        dropped_degenerate=mesh.dropped_degenerate,
    )
    return out, transform


# ---------------------------------------------------------------------------
# conservative surface voxelization (separating axis test)


def mark_surface_voxels(mesh: TriangleMesh, resolution) -> np.ndarray:
    """Coords of all voxels of a [-1,1]^3 grid whose cube meets a triangle."""
    res = np.atleast_1d(resolution).astype(int)
    res = np.broadcast_to(res, (3,)).copy()
    h = 2.0 / res
    tri = mesh.triangle_vertices()
    found = []
    for t in range(tri.shape[0]):
        found.append(_voxels_hit_by_triangle(tri[t], res, h))
    if not found:
        raise NoSurfaceVoxels("mesh has no triangles")
    coords = np.concatenate(found, axis=0)
    if coords.shape[0] == 0:
        raise NoSurfaceVoxels("no voxel intersects the mesh surface")
    keys = linear_keys(coords, tuple(res))
    _, first = np.unique(keys, return_index=True)
    return coords[first]


def _voxels_hit_by_triangle(tri, res, h, chunk=2_000_000):
    lo = np.maximum(np.floor((tri.min(axis=0) + 1.0) / h - 1e-9).astype(int), 0)
    hi = np.minimum(np.ceil((tri.max(axis=0) + 1.0) / h + 1e-9).astype(int), res)
    if np.any(hi <= lo):
        return np.zeros((0, 3), dtype=np.int32)
    axes = [np.arange(lo[i], hi[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    cand = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    hits = []
    for start in range(0, cand.shape[0], chunk):
        block = cand[start : start + chunk]
        centers = (block + 0.5) * h - 1.0
        ok = _tri_box_overlap(tri, centers, h / 2.0)
        hits.append(block[ok])
    return np.concatenate(hits, axis=0).astype(np.int32)


def _tri_box_overlap(tri, centers, half):
    """Vectorized Akenine-Moller triangle/AABB separating-axis test."""
    v0 = tri[0] - centers
    v1 = tri[1] - centers
    v2 = tri[2] - centers
    e0, e1, e2 = tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]
    ok = np.ones(centers.shape[0], dtype=bool)

    def axis_test(a):
        # separation along axis a (broadcast over candidates)
        p0 = v0 @ a
        p1 = v1 @ a
        p2 = v2 @ a
        r = np.abs(a[0]) * half[0] + np.abs(a[1]) * half[1] + np.abs(a[2]) * half[2]
        mn = np.minimum(np.minimum(p0, p1), p2)
        mx = np.maximum(np.maximum(p0, p1), p2)
        return (mn <= r) & (mx >= -r)

    # box axes
    for i in range(3):
        mn = np.minimum(np.minimum(v0[:, i], v1[:, i]), v2[:, i])
        mx = np.maximum(np.maximum(v0[:, i], v1[:, i]), v2[:, i])
        ok &= (mn <= half[i]) & (mx >= -half[i])
    # 9 cross products of edges with box axes
    for e in (e0, e1, e2):
        for a in (
            np.array([0.0, -e[2], e[1]]),
            np.array([e[2], 0.0, -e[0]]),
            np.array([-e[1], e[0], 0.0]),
        ):
            ok &= axis_test(a)
    # triangle plane
    n = np.cross(e0, e1)
    r = np.abs(n[0]) * half[0] + np.abs(n[1]) * half[1] + np.abs(n[2]) * half[2]
    d = v0 @ n
    ok &= np.abs(d) <= r + 1e-12
    return ok


# ---------------------------------------------------------------------------
# BVH nearest point on surface


class TriangleBVH:
    """Median-split BVH over triangles with batched nearest-point queries."""

    LEAF_SIZE = 4

    def __init__(self, mesh: TriangleMesh):
        tri = mesh.triangle_vertices()
        if tri.shape[0] == 0:
            raise EmptyMesh("cannot build a BVH over zero triangles")
        self.tri = tri
        self.order = np.empty(tri.shape[0], dtype=np.int64)
        self._leaf_cursor = 0
        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        centroids = tri.mean(axis=1)
        self.nodes = []  # [lo, hi, left, right, start, count]
        self._build(np.arange(tri.shape[0]), lo, hi, centroids)
        self._ordered = self.tri[self.order]

    def _build(self, idx, lo, hi, centroids):
        node_lo = lo[idx].min(axis=0)
        node_hi = hi[idx].max(axis=0)
        me = len(self.nodes)
        self.nodes.append([node_lo, node_hi, -1, -1, -1, -1])
        if len(idx) <= self.LEAF_SIZE:
            # leaves store a contiguous slice of the reordered triangle list
            self.nodes[me][4] = self._leaf_cursor
            self.nodes[me][5] = len(idx)
            self.order[self._leaf_cursor : self._leaf_cursor + len(idx)] = idx
            self._leaf_cursor += len(idx)
            return me
        axis = int(np.argmax(node_hi - node_lo))
        med = np.median(centroids[idx, axis])
        left_sel = centroids[idx, axis] <= med
        if left_sel.all() or not left_sel.any():
            half = len(idx) // 2
            part = np.argsort(centroids[idx, axis], kind="stable")
            left_idx, right_idx = idx[part[:half]], idx[part[half:]]
        else:
            left_idx, right_idx = idx[left_sel], idx[~left_sel]
        self.nodes[me][2] = self._build(left_idx, lo, hi, centroids)
        self.nodes[me][3] = self._build(right_idx, lo, hi, centroids)
        return me

    def query(self, points: np.ndarray):
        """Globally nearest surface point per query.

        Returns (closest (N,3), triangle index (N,), distance (N,)).
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = points.shape[0]
        best_d2 = np.full(n, np.inf)
        best_p = np.zeros((n, 3))
        best_t = np.zeros(n, dtype=np.int64)
        self._visit(0, np.arange(n), points, best_d2, best_p, best_t)
        return best_p, self.order[best_t], np.sqrt(best_d2)

    def _visit(self, node_id, active, points, best_d2, best_p, best_t):
        lo, hi, left, right, start, count = self.nodes[node_id]
        p = points[active]
        d = np.maximum(lo - p, 0.0) + np.maximum(p - hi, 0.0)
        lb2 = np.einsum("ij,ij->i", d, d)
        keep = lb2 < best_d2[active]
        if not keep.any():
            return
        active = active[keep]
        if left < 0:  # leaf
            tris = self._ordered[start : start + count]
            cp = closest_point_on_triangles(points[active], tris)  # (m, L, 3)
            diff = cp - points[active][:, None, :]
            d2 = np.einsum("mlk,mlk->ml", diff, diff)
            which = np.argmin(d2, axis=1)
            dmin = d2[np.arange(len(active)), which]
            better = dmin < best_d2[active]
            upd = active[better]
            best_d2[upd] = dmin[better]
            best_p[upd] = cp[np.arange(len(active)), which][better]
            best_t[upd] = start + which[better]
            return
        # visit the child whose box is nearer to the active centroid first
        c = points[active].mean(axis=0)
        dl = np.linalg.norm(np.maximum(self.nodes[left][0] - c, 0) + np.maximum(c - self.nodes[left][1], 0))
        dr = np.linalg.norm(np.maximum(self.nodes[right][0] - c, 0) + np.maximum(c - self.nodes[right][1], 0))
        first, second = (left, right) if dl <= dr else (right, left)
        self._visit(first, active, points, best_d2, best_p, best_t)
        self._visit(second, active, points, best_d2, best_p, best_t)


def closest_point_on_triangles(points, tris):
    """Closest point on each triangle for each query (vectorized Ericson).

    points: (M, 3); tris: (L, 3, 3). Returns (M, L, 3).
    """
    a = tris[None, :, 0, :]  # (1, L, 3)
    b = tris[None, :, 1, :]
    c = tris[None, :, 2, :]
    p = points[:, None, :]  # (M, 1, 3)
    ab = b - a
    ac = c - a
    ap = p - a

    def dot(u, v):
        return (u * v).sum(axis=-1)

    d1 = dot(ab, ap)
    d2 = dot(ac, ap)
    bp = p - b
    d3 = dot(ab, bp)
    d4 = dot(ac, bp)
    cp = p - c
    d5 = dot(ab, cp)
    d6 = dot(ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    v_face = (vb / denom)[..., None]
    w_face = (vc / denom)[..., None]
    out = a + ab * v_face + ac * w_face  # interior case

    t_bc = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0, 1.0, (d4 - d3) + (d5 - d6))
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    out = np.where(on_bc[..., None], b + t_bc[..., None] * (c - b), out)

    t_ac = d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(on_ac[..., None], a + t_ac[..., None] * ac, out)

    t_ab = d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(on_ab[..., None], a + t_ab[..., None] * ab, out)

    on_c = (d6 >= 0) & (d5 <= d6)
    out = np.where(on_c[..., None], np.broadcast_to(c, out.shape), out)
    on_b = (d3 >= 0) & (d4 <= d3)
    out = np.where(on_b[..., None], np.broadcast_to(b, out.shape), out)
    on_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(on_a[..., None], np.broadcast_to(a, out.shape), out)
    return out


# ---------------------------------------------------------------------------
# finest-level sampling and pyramid construction


def sample_finest(
    mesh: TriangleMesh,
    sample_resolution: int,
    finest_level_resolution: int,
    level: int = 1,
    qem: bool = True,
) -> SparseGrid:
    """Extract the finest ground-truth grid G^L from a normalized mesh."""
    k = 0
    r = int(sample_resolution)
    while r > finest_level_resolution:
        if r % 2:
            break
        r //= 2
        k += 1
    if r != finest_level_resolution:
        raise IndivisibleResolution(
            f"sample resolution {sample_resolution} is not "
            f"{finest_level_resolution} * 2^k"
        )
    coords = mark_surface_voxels(mesh, sample_resolution)
    h = 2.0 / sample_resolution
    centers = (coords + 0.5) * h - 1.0

    bvh = TriangleBVH(mesh)
    nearest, tri_idx, _ = bvh.query(centers)

    offsets = np.clip((nearest - centers) / h, -0.5, 0.5)
    normals = _surface_normals(mesh, nearest, tri_idx)
    colors = _surface_colors(mesh, nearest, tri_idx)

    feats = np.empty((N_CHANNELS, coords.shape[0]), dtype=np.float32)
    feats[OFFSET] = offsets.T
    feats[NORMAL] = normals.T
    feats[COLOR] = colors.T
    feats[MASK] = 1.0
    grid = SparseGrid.create(
        level + k, (sample_resolution,) * 3, coords, feats, (h,) * 3
    )
    for _ in range(k):
        grid = pool_level(grid, qem=qem)
    return grid


def _barycentric(mesh, points, tri_idx):
    tv = mesh.triangle_vertices()[tri_idx]
    a, b, c = tv[:, 0], tv[:, 1], tv[:, 2]
    v0, v1, v2 = b - a, c - a, points - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    denom = d00 * d11 - d01 * d01
    denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    u = 1.0 - v - w
    bary = np.clip(np.stack([u, v, w], axis=1), 0.0, 1.0)
    return bary / bary.sum(axis=1, keepdims=True)


def _surface_normals(mesh, points, tri_idx):
    if mesh.vertex_normals is None:
        n = mesh.face_normals[tri_idx]
    else:
        bary = _barycentric(mesh, points, tri_idx)
        vn = mesh.vertex_normals[mesh.triangles[tri_idx]]  # (N, 3, 3)
        n = np.einsum("nk,nkj->nj", bary, vn)
        bad = np.linalg.norm(n, axis=1) < 1e-9
        if bad.any():
            n[bad] = mesh.face_normals[tri_idx[bad]]
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


def _surface_colors(mesh, points, tri_idx):
    if mesh.vertex_colors is None:
        rgb = np.ones((len(points), 3))
    else:
        bary = _barycentric(mesh, points, tri_idx)
        vc = mesh.vertex_colors[mesh.triangles[tri_idx]]
        rgb = np.einsum("nk,nkj->nj", bary, vc)
    return 4.0 * (rgb - 0.5)


@dataclass
class Pyramid:
    """L-level stack of ground-truth grids, coarse (1) to fine (L)."""

    levels: list[SparseGrid]
    world_transform: WorldTransform

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, l: int) -> SparseGrid:
        return self.levels[l - 1]


def build_pyramid(
    finest: SparseGrid, num_levels: int, qem: bool = True
) -> list[SparseGrid]:
    """Pool the finest grid down to level 1; returns [G^1 .. G^L]."""
    for axis_res in finest.resolution:
        if axis_res % (2 ** (num_levels - 1)):
            raise IndivisibleResolution(
                f"resolution {finest.resolution} not divisible by 2^{num_levels - 1}"
            )
    levels = [replace(finest, level=num_levels, _index_map=None)]
    for l in range(num_levels - 1, 0, -1):
        coarser = pool_level(levels[0], qem=qem)
        levels.insert(0, replace(coarser, level=l, _index_map=None))
    return levels


def extract_pyramid(
    mesh: TriangleMesh,
    num_levels: int,
    base_resolution: int,
    sample_resolution: int,
    qem: bool = True,
    normalize: bool = True,
) -> Pyramid:
    """Full extraction: normalize, sample the finest level, build all levels."""
    if normalize:
        mesh, transform = normalize_mesh(mesh)
    else:
        transform = WorldTransform.identity()
    finest_res = base_resolution * 2 ** (num_levels - 1)
    finest = sample_finest(
        mesh, sample_resolution, finest_res, level=num_levels, qem=qem
    )
    return Pyramid(build_pyramid(finest, num_levels, qem=qem), transform)
