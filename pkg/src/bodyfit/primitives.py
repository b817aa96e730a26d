"""Simple analytic meshes used as oracles (plane, sphere, cylinder, prism)."""

import numpy as np

from .mesh import TriangleMesh


def planar_grid(nx: int, ny: int, width: float = 1.0, height: float | None = None, diagonal: str = "alternate") -> TriangleMesh:
    """Regular grid in the z=0 plane, faces wound counter-clockwise (normals +z).

    ``diagonal="alternate"`` flips the split direction in a checkerboard so
    the triangulation has no preferred direction.
    """
    height = width if height is None else height
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, height, ny)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b = a + 1
            c = a + nx
            d = c + 1
            if diagonal == "alternate" and (i + j) % 2:
                faces += [(a, b, c), (b, d, c)]
            else:
                faces += [(a, b, d), (a, d, c)]
    return TriangleMesh(verts, faces)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.array(verts) * radius, faces)


def cylinder(radius: float = 1.0, height: float = 1.0, segments: int = 64, rings: int = 32, capped: bool = True) -> TriangleMesh:
    """Axis-aligned (z) cylinder from z=0 to z=height, optionally closed with fans."""
    th = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    zs = np.linspace(0.0, height, rings + 1)
    verts = [(radius * np.cos(t), radius * np.sin(t), z) for z in zs for t in th]
    faces = []
    for r in range(rings):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = a + segments
            d = b + segments
            faces += [(a, b, d), (a, d, c)]
    if capped:
        bottom = len(verts)
        verts.append((0.0, 0.0, 0.0))
        top = len(verts)
        verts.append((0.0, 0.0, height))
        last = rings * segments
        for s in range(segments):
            faces.append((bottom, (s + 1) % segments, s))
            faces.append((top, last + s, last + (s + 1) % segments))
    return TriangleMesh(np.array(verts), faces)


def square_prism(width: float = 1.0, height: float = 1.0, rings: int = 8) -> TriangleMesh:
    """Closed prism with a square cross-section of side ``width`` along z."""
    h = width / 2.0
    corners = [(-h, -h), (0, -h), (h, -h), (h, 0), (h, h), (0, h), (-h, h), (-h, 0)]
    n = len(corners)
    zs = np.linspace(0.0, height, rings + 1)
    verts = [(x, y, z) for z in zs for x, y in corners]
    faces = []
    for r in range(rings):
        for s in range(n):
            a = r * n + s
            b = r * n + (s + 1) % n
            faces += [(a, b, b + n), (a, b + n, a + n)]
    bottom = len(verts)
    verts.append((0.0, 0.0, 0.0))
    top = len(verts)
    verts.append((0.0, 0.0, height))
    for s in range(n):
        faces.append((bottom, (s + 1) % n, s))
        faces.append((top, rings * n + s, rings * n + (s + 1) % n))
    return TriangleMesh(np.array(verts, dtype=float), faces)
