"""Procedural exemplar meshes for demos and the verification suite."""

from __future__ import annotations

import numpy as np

from .exemplar import TriangleMesh


def _quad(a, b, c, d):
    """Two triangles for the quad a-b-c-d (counter-clockwise)."""
    return [(a, b, c), (a, c, d)]


def _mesh_from_quads(quads, color=None):
    verts = []
    vmap = {}
    tris = []

    def vid(p):
        key = tuple(np.round(p, 9))
        if key not in vmap:
            vmap[key] = len(verts)
            verts.append(key)
        return vmap[key]

    for quad in quads:
        ids = [vid(p) for p in quad]
        for t in _quad(*ids):
            tris.append(t)
    verts = np.array(verts, dtype=np.float64)
    colors = None
    if color is not None:
        colors = np.tile(np.asarray(color, dtype=np.float64), (len(verts), 1))
    return TriangleMesh(verts, np.array(tris, dtype=np.int32), vertex_colors=colors)


def box_quads(lo, hi):
    """Six outward-facing quads of an axis-aligned box."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    return [
        [(x0, y0, z0), (x0, y1, z0), (x1, y1, z0), (x1, y0, z0)],  # -z
        [(x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)],  # +z
        [(x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1)],  # -y
        [(x0, y1, z0), (x0, y1, z1), (x1, y1, z1), (x1, y1, z0)],  # +y
        [(x0, y0, z0), (x0, y0, z1), (x0, y1, z1), (x0, y1, z0)],  # -x
        [(x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1)],  # +x
    ]


def notched_box(half=0.72, notch_width=0.34, notch_depth=0.5, color=(1.0, 1.0, 1.0)):
    """An axis-aligned box with a rectangular groove across the top face.

    The groove runs the full y extent; walls and floor are real surface so
    the exemplar has concave structure at every pyramid level.
    """
    h = half
    w = notch_width / 2.0
    zf = h - notch_depth  # groove floor height
    quads = [
        [(-h, -h, -h), (-h, h, -h), (h, h, -h), (h, -h, -h)],  # bottom (-z)
        [(-h, -h, -h), (h, -h, -h), (h, -h, h), (-h, -h, h)],  # -y side
        [(-h, h, -h), (-h, h, h), (h, h, h), (h, h, -h)],  # +y side
        [(-h, -h, -h), (-h, -h, h), (-h, h, h), (-h, h, -h)],  # -x side
        [(h, -h, -h), (h, h, -h), (h, h, h), (h, -h, h)],  # +x side
        # top strips (+z) on both sides of the groove
        [(-h, -h, h), (-w, -h, h), (-w, h, h), (-h, h, h)],
        [(w, -h, h), (h, -h, h), (h, h, h), (w, h, h)],
        # groove walls (facing each other) and floor
        [(-w, -h, zf), (-w, -h, h), (-w, h, h), (-w, h, zf)],
        [(w, -h, zf), (w, h, zf), (w, h, h), (w, -h, h)],
        [(-w, -h, zf), (w, -h, zf), (w, h, zf), (-w, h, zf)],
    ]
    return _mesh_from_quads(quads, color=color)


def cube_corner(q=(0.123, 0.071, -0.042), extent=1.4, color=(1.0, 1.0, 1.0)):
    """Three orthogonal plates meeting at corner q (an inside box corner)."""
    qx, qy, qz = q
    s = extent
    quads = [
        # plane z = qz spanning +x, +y from the corner
        [(qx, qy, qz), (qx + s, qy, qz), (qx + s, qy + s, qz), (qx, qy + s, qz)],
        # plane y = qy spanning +x, +z
        [(qx, qy, qz), (qx, qy, qz + s), (qx + s, qy, qz + s), (qx + s, qy, qz)],
        # plane x = qx spanning +y, +z
        [(qx, qy, qz), (qx, qy + s, qz), (qx, qy + s, qz + s), (qx, qy, qz + s)],
    ]
    return _mesh_from_quads(quads, color=color)


def unit_plate(z=0.0, half=0.5):
    """A square plate in the plane z=const (two triangles)."""
    return _mesh_from_quads(
        [[(-half, -half, z), (half, -half, z), (half, half, z), (-half, half, z)]]
    )


def icosphere(radius=0.8, subdivisions=3, color=None):
    """Subdivided icosahedron projected to the sphere of given radius."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = (verts[i] + verts[j]) / 2.0
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(m)
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new_faces
    vertices = np.array(verts) * radius
    normals = np.array(verts)
    colors = None
    if color is not None:
        colors = np.tile(np.asarray(color, dtype=np.float64), (len(vertices), 1))
    return TriangleMesh(
        vertices,
        np.array(faces, dtype=np.int32),
        vertex_colors=colors,
        vertex_normals=normals,
    )
