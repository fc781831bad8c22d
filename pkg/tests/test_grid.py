import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_flood, dense_pool
from voxgen import grid as g
from voxgen.errors import (
    EmptyResult,
    LevelOverflow,
    OddResolution,
    OutOfBounds,
    TopologyMismatch,
)
from voxgen.grid import (
    COLOR,
    MASK,
    NORMAL,
    OFFSET,
    SparseGrid,
    VoxelBox,
    avg_pool,
    crop,
    flood,
    full_grid,
    gather_neighborhood,
    load_grid,
    paste,
    pool_level,
    prune,
    qem_pool,
    save_grid,
    subdivide,
)

from conftest import make_grid


def random_surface_grid(rng, resolution=8, density=0.2, level=3):
    rx, ry, rz = (resolution,) * 3 if np.isscalar(resolution) else resolution
    occ = rng.random((rx, ry, rz)) < density
    coords = np.argwhere(occ)
    if len(coords) == 0:
        coords = np.array([[0, 0, 0]])
    return make_grid(coords, level=level, resolution=(rx, ry, rz), rng=rng)


# ---------------------------------------------------------------------------
# container basics


def test_canonical_order_and_lookup(rng):
    coords = [[3, 1, 0], [0, 0, 0], [1, 2, 3], [5, 5, 5]]
    gr = make_grid(coords, rng=rng)
    keys = gr.keys()
    assert np.all(np.diff(keys) > 0)
    for i, c in enumerate(gr.coords):
        assert gr.index_of(c) == i
    assert gr.index_of((7, 7, 7)) == -1
    assert gr.lookup(np.array([[7, 7, 7], [0, 0, 0]])).tolist() == [
        -1,
        gr.index_of((0, 0, 0)),
    ]


def test_duplicate_coords_rejected():
    with pytest.raises(ValueError):
        make_grid([[1, 1, 1], [1, 1, 1]])


def test_grids_are_immutable(rng):
    gr = make_grid([[0, 0, 0]], rng=rng)
    with pytest.raises(ValueError):
        gr.coords[0, 0] = 3
    with pytest.raises(ValueError):
        gr.features[0, 0] = 3.0


# ---------------------------------------------------------------------------
# avg_pool


def test_avg_pool_identity_under_equal_inputs():
    coords = [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)]
    feats = np.zeros((10, 8))
    feats[COLOR] = 1.0
    feats[NORMAL][2] = 1.0
    feats[MASK] = 1.0
    gr = SparseGrid.create(2, 8, coords, feats, 0.25)
    coarse = avg_pool(gr)
    assert coarse.num_voxels == 1
    assert coarse.level == 1
    assert coarse.resolution == (4, 4, 4)
    np.testing.assert_allclose(coarse.features[COLOR][:, 0], [1, 1, 1])
    assert coarse.features[MASK][0] == 1.0


def test_avg_pool_single_child_mean():
    feats = np.zeros((10, 1))
    feats[NORMAL][2] = 1.0
    feats[MASK] = 1.0
    gr = SparseGrid.create(2, 8, [[4, 2, 6]], feats, 0.25)
    coarse = avg_pool(gr)
    assert coarse.coords.tolist() == [[2, 1, 3]]
    np.testing.assert_allclose(coarse.features[NORMAL][:, 0], [0, 0, 1])
    assert coarse.features[MASK][0] == 1.0


def test_avg_pool_two_normals_renormalized():
    # hand-computed mean of (1,0,0) and (0,1,0), renormalized
    feats = np.zeros((10, 2))
    feats[NORMAL, 0] = [1, 0, 0]
    feats[NORMAL, 1] = [0, 1, 0]
    feats[MASK] = 1.0
    gr = SparseGrid.create(2, 8, [[0, 0, 0], [1, 0, 0]], feats, 0.25)
    coarse = avg_pool(gr)
    expect = np.array([1, 1, 0]) / np.sqrt(2)
    np.testing.assert_allclose(coarse.features[NORMAL][:, 0], expect, atol=1e-12)


def test_avg_pool_odd_resolution_rejected(rng):
    gr = make_grid([[0, 0, 0]], resolution=7, rng=rng)
    with pytest.raises(OddResolution):
        avg_pool(gr)


def test_avg_pool_mask_max():
    feats = np.zeros((10, 2))
    feats[NORMAL][2] = 1.0
    feats[MASK] = [-1.0, 1.0]
    gr = SparseGrid.create(2, 8, [[0, 0, 0], [1, 1, 1]], feats, 0.25)
    assert avg_pool(gr).features[MASK][0] == 1.0


# ---------------------------------------------------------------------------
# qem_pool


def _qem_grid(coords, offsets, normals, resolution=8, level=2):
    feats = np.zeros((10, len(coords)))
    feats[OFFSET] = np.asarray(offsets).T
    feats[NORMAL] = np.asarray(normals).T
    feats[MASK] = 1.0
    return SparseGrid.create(level, resolution, coords, feats, 2.0 / resolution)


def test_qem_three_orthogonal_planes_recover_corner():
    # children sampling planes x=qx, y=qy, z=qz inside coarse cell (0,0,0)
    vs = 0.25
    q = np.array([-0.93, -0.81, -0.72])  # inside the coarse cube [-1,-0.5]^3

    def offset_for(coord, point):
        center = (np.asarray(coord) + 0.5 - 4.0) * vs
        return (point - center) / vs

    coords = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    pts = [
        np.array([q[0], -0.90, -0.95]),  # on plane x = qx
        np.array([-0.60, q[1], -0.93]),  # on plane y = qy
        np.array([-0.95, -0.65, q[2]]),  # on plane z = qz
    ]
    normals = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    offsets = [offset_for(c, p) for c, p in zip(coords, pts)]
    gr = _qem_grid(coords, offsets, normals)
    coarse = avg_pool(gr)
    off = qem_pool(gr, coarse)
    center = (np.array([0, 0, 0]) + 0.5 - 2.0) * 2 * vs
    point = center + off[:, 0] * 2 * vs
    # eps-regularized minimizer sits within O(eps) of the true corner
    assert np.linalg.norm(point - q) < 5e-3


def test_qem_shared_plane_regularized_centroid():
    # all children on plane z = z0 with normal +z
    vs = 0.25
    z0 = -0.84
    coords = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
    pts, normals = [], []
    for c in coords:
        center = (np.asarray(c) + 0.5 - 4.0) * vs
        pts.append(np.array([center[0] + 0.03, center[1] - 0.04, z0]))
        normals.append([0, 0, 1])
    offsets = [(p - (np.asarray(c) + 0.5 - 4.0) * vs) / vs for c, p in zip(coords, pts)]
    gr = _qem_grid(coords, offsets, normals)
    coarse = avg_pool(gr)
    off = qem_pool(gr, coarse)
    csize = 2 * vs
    center = (np.array([0, 0, 0]) + 0.5 - 2.0) * csize
    point = center + off[:, 0] * csize
    centroid = np.mean(pts, axis=0)
    # closed form: z within eps tolerance of z0, x/y at the centroid
    k, eps = 4, 1e-3 * 4
    z_expect = (k * z0 + eps * centroid[2]) / (k + eps)
    assert abs(point[2] - z0) < 1e-3 * csize + 1e-9
    np.testing.assert_allclose(point[2], z_expect, atol=1e-12)
    np.testing.assert_allclose(point[:2], centroid[:2], atol=1e-12)


def test_qem_single_child_exact():
    vs = 0.25
    coords = [[3, 5, 7]]
    center = (np.asarray(coords[0]) + 0.5 - 4.0) * vs
    p = center + np.array([0.21, -0.37, 0.11]) * vs
    gr = _qem_grid(coords, [(p - center) / vs], [[0.6, 0.48, 0.64]])
    coarse = avg_pool(gr)
    off = qem_pool(gr, coarse)
    csize = 2 * vs
    ccenter = (coarse.coords[0] + 0.5 - 2.0) * csize
    np.testing.assert_allclose(ccenter + off[:, 0] * csize, p, atol=1e-12)


def test_qem_topology_mismatch(rng):
    gr = random_surface_grid(rng)
    other = make_grid([[0, 0, 0]], level=gr.level - 1, resolution=4, rng=rng)
    with pytest.raises(TopologyMismatch):
        qem_pool(gr, other)


def test_pooling_matches_dense_oracle(rng):
    # A1 oracle: avg_pool and qem_pool agree with dense brute force
    for trial in range(3):
        gr = random_surface_grid(rng, resolution=8, density=0.3)
        o_coords, o_feats = dense_pool(gr, qem=True)
        got = pool_level(gr, qem=True)
        np.testing.assert_array_equal(got.coords, o_coords)
        np.testing.assert_allclose(got.features, o_feats, atol=1e-6)
        o_coords, o_feats = dense_pool(gr, qem=False)
        got = avg_pool(gr)
        np.testing.assert_array_equal(got.coords, o_coords)
        np.testing.assert_allclose(got.features, o_feats, atol=1e-6)


# ---------------------------------------------------------------------------
# subdivide


def test_subdivide_center_offset():
    feats = np.zeros((10, 1))
    feats[MASK] = 1.0
    gr = SparseGrid.create(1, 4, [[1, 1, 1]], feats, 0.5)
    fine = subdivide(gr)
    assert fine.num_voxels == 8
    assert fine.resolution == (8, 8, 8)
    i = fine.index_of((2, 2, 2))  # child with corner (-0.5,-0.5,-0.5)
    np.testing.assert_allclose(fine.features[OFFSET][:, i], [0.5, 0.5, 0.5])
    # world point preserved: recompute world coordinates
    parent_point = gr.world_points()[0]
    child_point = fine.world_points()[i]
    np.testing.assert_allclose(child_point, parent_point, atol=1e-12)


def test_subdivide_copies_mask():
    feats = np.zeros((10, 1))
    feats[MASK] = -1.0
    gr = SparseGrid.create(1, 4, [[0, 0, 0]], feats, 0.5)
    fine = subdivide(gr)
    assert np.all(fine.features[MASK] == -1.0)


def test_subdivide_boundary_offset_clamped():
    feats = np.zeros((10, 1))
    feats[OFFSET] = 0.5
    feats[MASK] = 1.0
    gr = SparseGrid.create(1, 4, [[1, 1, 1]], feats, 0.5)
    fine = subdivide(gr)
    i = fine.index_of((3, 3, 3))  # corner (+0.5,+0.5,+0.5) child
    np.testing.assert_allclose(fine.features[OFFSET][:, i], [0.5, 0.5, 0.5])
    np.testing.assert_allclose(fine.world_points()[i], gr.world_points()[0], atol=1e-12)


def test_subdivide_level_overflow(rng):
    gr = make_grid([[0, 0, 0]], level=3, rng=rng)
    with pytest.raises(LevelOverflow):
        subdivide(gr, max_level=3)


def test_subdivide_then_pool_topology_roundtrip(rng):
    gr = random_surface_grid(rng, resolution=8, density=0.25, level=1)
    fine = subdivide(gr)
    coarse = avg_pool(fine)
    np.testing.assert_array_equal(coarse.coords, gr.coords)


# ---------------------------------------------------------------------------
# prune / flood


def test_prune_all_positive_identity(rng):
    gr = random_surface_grid(rng)
    pruned = prune(gr)
    np.testing.assert_array_equal(pruned.coords, gr.coords)
    np.testing.assert_array_equal(pruned.features, gr.features)


def test_prune_alternating():
    feats = np.zeros((10, 10))
    feats[MASK] = [1, -1] * 5
    coords = [[i, 0, 0] for i in range(10)]
    gr = SparseGrid.create(2, 16, coords, feats, 0.125)
    pruned = prune(gr)
    assert pruned.num_voxels == 5
    assert pruned.coords[:, 0].tolist() == [0, 2, 4, 6, 8]


def test_prune_empty_result():
    feats = np.zeros((10, 2))
    feats[MASK] = -1.0
    gr = SparseGrid.create(2, 8, [[0, 0, 0], [1, 0, 0]], feats, 0.25)
    with pytest.raises(EmptyResult):
        prune(gr)


def test_flood_no_ghosts_identity(rng):
    gr = random_surface_grid(rng)
    out = flood(gr, gr)
    np.testing.assert_array_equal(out.coords, gr.coords)
    np.testing.assert_allclose(out.features, gr.features)


def test_flood_single_neighbor_copy():
    feats = np.zeros((10, 1))
    feats[COLOR, 0] = [1, 0, 0]
    feats[MASK] = 1.0
    src = SparseGrid.create(2, 8, [[2, 2, 2]], feats, 0.25)
    target = make_grid([[2, 2, 2], [3, 2, 2]], resolution=8)
    out = flood(target, src)
    j = out.index_of((3, 2, 2))
    np.testing.assert_allclose(out.features[COLOR][:, j], [1, 0, 0])
    assert out.features[MASK][j] == -1.0
    i = out.index_of((2, 2, 2))
    assert out.features[MASK][i] == 1.0


def test_flood_two_neighbor_average():
    feats = np.zeros((10, 2))
    feats[COLOR, 0] = [2, 0, 0]
    feats[COLOR, 1] = [0, 2, 0]
    feats[MASK] = 1.0
    src = SparseGrid.create(2, 8, [[1, 2, 2], [3, 2, 2]], feats, 0.25)
    target = make_grid([[1, 2, 2], [2, 2, 2], [3, 2, 2]], resolution=8)
    out = flood(target, src)
    j = out.index_of((2, 2, 2))
    np.testing.assert_allclose(out.features[COLOR][:, j], [1, 1, 0])


def test_flood_matches_brute_force(rng):
    for _ in range(3):
        target = random_surface_grid(rng, resolution=6, density=0.5)
        take = rng.random(target.num_voxels) < 0.4
        if not take.any():
            take[0] = True
        src = SparseGrid(
            target.level,
            target.resolution,
            target.coords[take],
            target.features[:, take],
            target.voxel_size,
        )
        got = flood(target, src)
        expect = brute_force_flood(target, src)
        np.testing.assert_allclose(got.features, expect, atol=1e-9)


def test_flood_unreached_gets_global_mean(rng):
    # two voxels far apart: the isolated one can never be reached
    src_feats = np.zeros((10, 2))
    src_feats[COLOR, 0] = [2, 0, 0]
    src_feats[COLOR, 1] = [0, 2, 0]
    src_feats[MASK] = 1.0
    src = SparseGrid.create(2, 16, [[0, 0, 0], [1, 0, 0]], src_feats, 0.125)
    target = make_grid([[0, 0, 0], [1, 0, 0], [15, 15, 15]], resolution=16)
    out = flood(target, src)
    j = out.index_of((15, 15, 15))
    np.testing.assert_allclose(out.features[COLOR][:, j], [1, 1, 0])
    assert out.features[MASK][j] == -1.0


def test_flood_topology_mismatch(rng):
    src = make_grid([[0, 0, 0], [5, 5, 5]], rng=rng)
    target = make_grid([[0, 0, 0]], rng=rng)
    with pytest.raises(TopologyMismatch):
        flood(target, src)


def test_prune_flood_restriction_roundtrip(rng):
    target = random_surface_grid(rng, resolution=6, density=0.6)
    take = rng.random(target.num_voxels) < 0.5
    if not take.any():
        take[0] = True
    src = SparseGrid(
        target.level,
        target.resolution,
        target.coords[take],
        target.features[:, take],
        target.voxel_size,
    )
    restored = prune(flood(target, src))
    np.testing.assert_array_equal(restored.coords, src.coords)
    np.testing.assert_array_equal(restored.features, src.features)


# ---------------------------------------------------------------------------
# crop / paste


def test_crop_full_identity(rng):
    gr = random_surface_grid(rng)
    out = crop(gr, VoxelBox((0, 0, 0), gr.resolution))
    np.testing.assert_array_equal(out.coords, gr.coords)
    np.testing.assert_array_equal(out.features, gr.features)


def test_crop_empty_box(rng):
    gr = make_grid([[0, 0, 0]], rng=rng)
    out = crop(gr, VoxelBox((4, 4, 4), (6, 6, 6)))
    assert out.num_voxels == 0
    assert out.resolution == (2, 2, 2)


def test_crop_matches_brute_force(rng):
    gr = random_surface_grid(rng, resolution=16, density=0.3)
    box = VoxelBox((4, 4, 4), (12, 12, 12))
    out = crop(gr, box)
    expect = []
    for i, c in enumerate(gr.coords):
        if all(4 <= v < 12 for v in c):
            expect.append((tuple(c - 4), gr.features[:, i]))
    expect.sort(key=lambda e: (e[0][2], e[0][1], e[0][0]))
    assert out.num_voxels == len(expect)
    for i, (c, f) in enumerate(expect):
        assert tuple(out.coords[i]) == c
        np.testing.assert_array_equal(out.features[:, i], f)


def test_crop_out_of_bounds(rng):
    gr = make_grid([[0, 0, 0]], resolution=8, rng=rng)
    with pytest.raises(OutOfBounds):
        crop(gr, VoxelBox((0, 0, 0), (9, 8, 8)))


def test_paste_onto_itself_identity(rng):
    gr = random_surface_grid(rng, resolution=8, density=0.4)
    box = VoxelBox((1, 1, 1), (4, 4, 4))
    out = paste(gr, box, (1, 1, 1))
    np.testing.assert_array_equal(out.coords, gr.coords)
    np.testing.assert_array_equal(out.features, gr.features)


def test_paste_empty_source_clears_destination(rng):
    gr = make_grid([[5, 5, 5]], resolution=8, rng=rng)
    box = VoxelBox((0, 0, 0), (3, 3, 3))  # empty source region
    out = paste(gr, box, (4, 4, 4))
    assert out.num_voxels == 0


def test_paste_translates_single_voxel(rng):
    gr = make_grid([[2, 2, 2]], resolution=8, rng=rng)
    out = paste(gr, VoxelBox((2, 2, 2), (3, 3, 3)), (5, 2, 2))
    assert out.num_voxels == 2  # original stays, copy appears
    j = out.index_of((5, 2, 2))
    assert j >= 0
    np.testing.assert_array_equal(out.features[:, j], gr.features[:, 0])


def test_paste_out_of_bounds(rng):
    gr = make_grid([[0, 0, 0]], resolution=8, rng=rng)
    with pytest.raises(OutOfBounds):
        paste(gr, VoxelBox((0, 0, 0), (4, 4, 4)), (6, 0, 0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_paste_roundtrip_property(seed):
    # paste a->b then paste-back b->a over disjoint boxes: the a-region is
    # restored exactly and the b-region holds a's content (copy semantics)
    rng = np.random.default_rng(seed)
    gr = random_surface_grid(rng, resolution=8, density=0.4)
    a = VoxelBox((0, 0, 0), (3, 3, 3))
    b = VoxelBox((4, 4, 4), (7, 7, 7))
    g2 = paste(gr, a, b.min_corner)
    g3 = paste(g2, b, a.min_corner)

    def region(grsel, box):
        m = box.contains(grsel.coords)
        return grsel.coords[m] - box.min_corner, grsel.features[:, m]

    ca, fa = region(gr, a)
    ca3, fa3 = region(g3, a)
    np.testing.assert_array_equal(ca3, ca)
    np.testing.assert_array_equal(fa3, fa)
    cb3, fb3 = region(g3, b)
    np.testing.assert_array_equal(cb3, ca)
    np.testing.assert_array_equal(fb3, fa)
    # everything outside a and b is untouched throughout
    outside = ~a.contains(gr.coords) & ~b.contains(gr.coords)
    out3 = ~a.contains(g3.coords) & ~b.contains(g3.coords)
    np.testing.assert_array_equal(g3.coords[out3], gr.coords[outside])
    np.testing.assert_array_equal(g3.features[:, out3], gr.features[:, outside])


# ---------------------------------------------------------------------------
# gather_neighborhood


def test_neighborhood_isolated_voxel(rng):
    gr = make_grid([[3, 3, 3]], rng=rng)
    tab = gather_neighborhood(gr, 3)
    pairs = tab.pairs(0)
    assert pairs == [((0, 0, 0), 0)]


def test_neighborhood_face_adjacent(rng):
    gr = make_grid([[3, 3, 3], [4, 3, 3]], rng=rng)
    tab = gather_neighborhood(gr, 3)
    i = gr.index_of((3, 3, 3))
    j = gr.index_of((4, 3, 3))
    assert ((1, 0, 0), j) in tab.pairs(i)
    assert ((-1, 0, 0), i) in tab.pairs(j)


def test_neighborhood_dense_block_brute_force(rng):
    coords = [[x, y, z] for x in range(4) for y in range(4) for z in range(4)]
    gr = make_grid(coords, resolution=4, rng=rng)
    tab = gather_neighborhood(gr, 3)
    lut = {tuple(c): i for i, c in enumerate(gr.coords)}
    for i, c in enumerate(gr.coords):
        expect = []
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    nb = (c[0] + dx, c[1] + dy, c[2] + dz)
                    if nb in lut:
                        expect.append(((dx, dy, dz), lut[nb]))
        assert sorted(tab.pairs(i)) == sorted(expect)
    interior = gr.index_of((1, 2, 1))
    assert len(tab.pairs(interior)) == 27


def test_neighborhood_extent_one(rng):
    gr = random_surface_grid(rng)
    tab = gather_neighborhood(gr, 1)
    assert tab.table.shape == (gr.num_voxels, 1)
    np.testing.assert_array_equal(tab.table[:, 0], np.arange(gr.num_voxels))


def test_tap_offsets_symmetric():
    offs = g.tap_offsets(3)
    np.testing.assert_array_equal(offs[::-1], -offs)


# ---------------------------------------------------------------------------
# io


def test_svg1_roundtrip(tmp_path, rng):
    gr = random_surface_grid(rng, resolution=8)
    path = tmp_path / "level.svg1"
    save_grid(path, gr)
    back = load_grid(path, voxel_size=gr.voxel_size)
    assert back.level == gr.level
    assert back.resolution == gr.resolution
    np.testing.assert_array_equal(back.coords, gr.coords)
    np.testing.assert_allclose(back.features, gr.features.astype(np.float32))


def test_full_grid_is_dense():
    gr = full_grid(1, (2, 3, 2), 0.5)
    assert gr.num_voxels == 12
    assert np.all(np.diff(gr.keys()) > 0)
