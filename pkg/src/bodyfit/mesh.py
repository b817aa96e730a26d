"""Triangle meshes and the intrinsic quantities computed on them.

All meshes in a registered family share one face array; vertex ``j`` of one
mesh corresponds to vertex ``j`` of every other.  Meshes are treated as
immutable: derived structures are cached on first use.

Laplacian convention used throughout the package::

    delta_j = mean(v_k for k in N1(j)) - v_j

so that ``v_j = mean(N1(j)) - delta_j`` holds exactly.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ._fmm import fast_marching, sublevel_area

DEFAULT_RADII = np.arange(1, 21) * 0.01


class MeshError(ValueError):
    pass


class TriangleMesh:
    """Vertex/face container with cached adjacency.

    Parameters
    ----------
    vertices : (n, 3) array_like
        Coordinates in meters.
    faces : (f, 3) array_like of int
        Zero-based vertex indices, counter-clockwise seen from outside.
    valid : (n,) bool array_like, optional
        False marks vertices lost to holes.  Defaults to all True.
    """

    def __init__(self, vertices, faces, valid=None):
        v = np.array(vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64, copy=True).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if np.any(bad):
            raise MeshError(f"degenerate face {int(np.flatnonzero(bad)[0])}")
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.faces = f
        if valid is None:
            valid = np.ones(len(v), dtype=bool)
        self.valid = np.asarray(valid, dtype=bool).copy()
        self.valid.setflags(write=False)

    def __len__(self):
        return len(self.vertices)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same connectivity, new positions (adjacency caches are shared)."""
        out = TriangleMesh.__new__(TriangleMesh)
        v = np.array(vertices, dtype=np.float64).reshape(self.vertices.shape)
        v.setflags(write=False)
        out.vertices = v
        out.faces = self.faces
        out.valid = self.valid
        for key in ("edges", "neighbors", "vertex_faces", "laplacian", "first_neighbors"):
            if key in self.__dict__:
                out.__dict__[key] = self.__dict__[key]
        return out

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0), scale=1.0) -> "TriangleMesh":
        R = np.asarray(rotation, dtype=float)
        return self.with_vertices(scale * self.vertices @ R.T + np.asarray(translation, dtype=float))

    # ---- combinatorics -------------------------------------------------

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        e.setflags(write=False)
        return e

    @cached_property
    def neighbors(self) -> tuple[np.ndarray, np.ndarray]:
        """One-ring neighborhoods in CSR form ``(indptr, indices)``, indices sorted."""
        n = self.n_vertices
        e = self.edges
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        A.sort_indices()
        return A.indptr.astype(np.int64), A.indices.astype(np.int64)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.neighbors[0])

    def neighbors_of(self, j: int) -> np.ndarray:
        ptr, idx = self.neighbors
        return idx[ptr[j]:ptr[j + 1]]

    @cached_property
    def vertex_faces(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_vertices
        f = self.faces
        rows = f.ravel()
        cols = np.repeat(np.arange(len(f)), 3)
        order = np.argsort(rows, kind="stable")
        ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(ptr, rows + 1, 1)
        return np.cumsum(ptr), cols[order].astype(np.int64)

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        """Uniform combinatorial Laplacian ``L`` with ``L @ V = mean(N1) - V``."""
        n = self.n_vertices
        ptr, idx = self.neighbors
        deg = np.diff(ptr).astype(float)
        rows = np.repeat(np.arange(n), np.diff(ptr))
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        W = sp.csr_matrix((inv[rows], (rows, idx)), shape=(n, n))
        return (W - sp.diags((deg > 0).astype(float))).tocsr()

    @cached_property
    def components(self) -> np.ndarray:
        n = self.n_vertices
        e = self.edges
        A = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        _, labels = connected_components(A, directed=False)
        return labels

    def largest_component(self) -> np.ndarray:
        """Boolean mask of the largest connected component that has faces."""
        labels = self.components.copy()
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.faces.ravel()] = True
        counts = np.bincount(labels[used], minlength=labels.max() + 1)
        return (labels == np.argmax(counts)) & used

    def compacted(self) -> tuple["TriangleMesh", np.ndarray]:
        """Drop invalid and face-less vertices.

        Returns the new mesh and the original index of every kept vertex.
        """
        keep = self.valid.copy()
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.faces.ravel()] = True
        keep &= used
        face_ok = keep[self.faces].all(axis=1)
        old = np.flatnonzero(keep)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[old] = np.arange(len(old))
        return TriangleMesh(self.vertices[old], remap[self.faces[face_ok]]), old

    # ---- geometry ------------------------------------------------------

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return self._face_areas.copy()

    @cached_property
    def _face_areas(self) -> np.ndarray:
        # positions are read-only, so per-mesh geometry can be cached
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    @cached_property
    def max_edge_length(self) -> float:
        e = self.edges
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).max())

    def area(self) -> float:
        return float(self.face_areas().sum())


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted vertex normals (sum of unnormalized face normals)."""
    fn = mesh.face_normals(normalize=False)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    if np.any(norm == 0):
        j = int(np.flatnonzero(norm == 0)[0])
        raise MeshError(f"vertex {j} has no incident face area")
    return acc / norm[:, None]


def laplace_offsets(mesh: TriangleMesh) -> np.ndarray:
    return np.asarray(mesh.laplacian @ mesh.vertices)


SEED_RINGS = 3


def _ring(mesh: TriangleMesh, source: int, rings: int) -> np.ndarray:
    ptr, nbr = mesh.neighbors
    seen = {int(source)}
    frontier = [int(source)]
    for _ in range(rings):
        nxt = []
        for v in frontier:
            for w in nbr[ptr[v]:ptr[v + 1]]:
                w = int(w)
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        frontier = nxt
    return np.fromiter(seen, dtype=np.int64, count=len(seen))


def fast_marching_geodesics(mesh: TriangleMesh, source, stop_distance: float = np.inf) -> np.ndarray:
    """Geodesic distance from ``source`` (index or indices) to every vertex.

    The few rings around a single source start from their straight-line
    distance; the point-source front is where first-order marching is least
    accurate.  Unreached vertices get ``inf``.  With a finite
    ``stop_distance`` the march halts once the front passes it; vertices
    beyond carry upper bounds.
    """
    ptr, idx = mesh.vertex_faces
    src = np.atleast_1d(np.asarray(source, dtype=np.int64))
    if len(src) == 1:
        seeds = _ring(mesh, src[0], SEED_RINGS)
        d0 = np.linalg.norm(mesh.vertices[seeds] - mesh.vertices[src[0]], axis=1)
    else:
        seeds, d0 = src, np.zeros(len(src))
    return fast_marching(mesh.vertices, mesh.faces, ptr, idx, seeds, d0, float(stop_distance))


def _sublevel_area_reference(mesh: TriangleMesh, dist: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Area of ``{x : d(x) <= a}`` with d linearly interpolated on each face."""
    near = np.flatnonzero(dist <= radii.max())
    ptr, idx = mesh.vertex_faces
    touched = np.unique(np.concatenate([idx[ptr[v]:ptr[v + 1]] for v in near])) if len(near) else np.zeros(0, int)
    d = dist[mesh.faces[touched]]
    area = mesh._face_areas[touched]
    # sort corner distances per face: d0 <= d1 <= d2
    d = np.sort(d, axis=1)
    d0, d1, d2 = (d[:, i][:, None] for i in range(3))
    a = radii[None, :]
    A = area[:, None]
    out = np.zeros((len(d), len(radii)))
    with np.errstate(divide="ignore", invalid="ignore"):
        # one corner inside
        t1 = np.clip((a - d0) / (d1 - d0), 0, 1)
        t2 = np.clip((a - d0) / (d2 - d0), 0, 1)
        one = A * t1 * t2
        # two corners inside: whole minus the cut-off corner at d2
        s1 = np.clip((d2 - a) / (d2 - d0), 0, 1)
        s2 = np.clip((d2 - a) / (d2 - d1), 0, 1)
        two = A * (1.0 - s1 * s2)
    inside0 = d0 <= a
    inside1 = d1 <= a
    inside2 = d2 <= a
    out = np.where(inside2, A, np.where(inside1, two, np.where(inside0, one, 0.0)))
    out = np.nan_to_num(out, nan=0.0)
    return out.sum(axis=0)


def geodesic_disk_descriptor(mesh: TriangleMesh, v: int, radii=DEFAULT_RADII, dist=None) -> np.ndarray:
    """Geodesic-disk area at each radius divided by the planar disk area."""
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be positive and ascending")
    if dist is None:
        # march a little past the largest radius so clipped faces see true values
        stop = radii[-1] + 3.0 * mesh.max_edge_length
        dist = fast_marching_geodesics(mesh, v, stop)
    return sublevel_area(mesh.faces, mesh._face_areas, dist, radii) / (np.pi * radii**2)


def farthest_point_sampling(mesh: TriangleMesh, n: int, seed_vertex: int = 0, return_distances: bool = False):
    """Geodesic farthest-point samples starting at ``seed_vertex``.

    Only vertices reachable from the seed are eligible.  With
    ``return_distances`` the per-sample distance fields (n, m) are returned too.
    """
    m = mesh.n_vertices
    if m == 0:
        raise MeshError("empty mesh")
    n = min(n, m)
    samples = [int(seed_vertex)]
    fields = []
    mind = np.full(m, np.inf)
    for i in range(n):
        d = fast_marching_geodesics(mesh, samples[-1])
        fields.append(d)
        mind = np.minimum(mind, d)
        if i == n - 1:
            break
        cand = np.where(np.isfinite(fields[0]), mind, -1.0)
        cand[samples] = -1.0
        top = cand.max()
        if top < 0:
            break
        # near-ties go to the lowest index so rigid copies sample alike
        nxt = int(np.flatnonzero(cand >= top * (1.0 - 1e-9))[0])
        samples.append(nxt)
    samples = np.array(samples, dtype=np.int64)
    if return_distances:
        return samples, np.array(fields)
    return samples


def average_geodesic_distance(mesh: TriangleMesh, sample_count: int = 64, seed_vertex: int = 0) -> float:
    """Mean geodesic distance between vertex pairs, estimated from FPS sources."""
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    if len(mesh.faces) == 0:
        raise MeshError("mesh has no triangles")
    _, fields = farthest_point_sampling(mesh, sample_count, seed_vertex, return_distances=True)
    if not np.all(np.isfinite(fields)):
        raise MeshError("mesh is disconnected")
    return float(fields.mean())


def average_edge_length(mesh: TriangleMesh) -> float:
    if mesh.n_vertices == 0 or len(mesh.faces) == 0:
        raise MeshError("empty mesh")
    e = mesh.edges
    return float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).mean())


def bounding_ball(points) -> tuple[np.ndarray, float]:
    """Approximate minimal enclosing sphere (Ritter's method, two far-point passes)."""
    p = np.asarray(points, dtype=float)
    if len(p) == 0:
        raise MeshError("empty point set")
    a = p[np.argmax(np.linalg.norm(p - p[0], axis=1))]
    b = p[np.argmax(np.linalg.norm(p - a, axis=1))]
    center = 0.5 * (a + b)
    radius = 0.5 * np.linalg.norm(b - a)
    for _ in range(2):
        for q in p[np.linalg.norm(p - center, axis=1) > radius]:
            d = np.linalg.norm(q - center)
            if d > radius:
                new_r = 0.5 * (radius + d)
                center = center + (d - new_r) / d * (q - center)
                radius = new_r
    return center, float(radius)


def bounding_ball_radius(mesh_or_points) -> float:
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriangleMesh) else mesh_or_points
    return bounding_ball(pts)[1]
