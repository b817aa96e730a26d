"""Posture-invariant shape space over local-frame Laplace coordinates.

A mesh is encoded by its Laplace offsets expressed in a per-vertex
orthonormal frame (normal, projected first-neighbour direction, their cross
product) plus one scale value, the average geodesic distance.  PCA over a
registered population gives the shape space; a shape-space point is turned
back into a mesh by minimizing the reconstruction energy

    E_human = sum_j || v_j - mean(N1(j)) + sum_k w_jk f_k(v_j) ||^2

with frames recomputed from the current vertices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh, average_geodesic_distance, laplace_offsets, MeshError
from .optimize import MinimizeOptions, minimize

logger = logging.getLogger(__name__)


class ShapeSpaceError(ValueError):
    pass


class ReconstructionError(RuntimeError):
    def __init__(self, message, energy=None, iterations=None):
        super().__init__(f"{message} (energy={energy}, iterations={iterations})")
        self.energy = energy
        self.iterations = iterations


def first_neighbors(mesh: TriangleMesh) -> np.ndarray:
    """Lowest-index one-ring neighbour of each vertex, skipping ones along the normal."""
    from .mesh import vertex_normals

    ptr, idx = mesh.neighbors
    n = vertex_normals(mesh)
    first = idx[ptr[:-1]].copy()
    u = mesh.vertices[first] - mesh.vertices
    p = u - np.einsum("ij,ij->i", u, n)[:, None] * n
    bad = np.linalg.norm(p, axis=1) <= 1e-9 * np.linalg.norm(u, axis=1)
    for j in np.flatnonzero(bad):
        for k in idx[ptr[j]:ptr[j + 1]]:
            uk = mesh.vertices[k] - mesh.vertices[j]
            pk = uk - uk.dot(n[j]) * n[j]
            if np.linalg.norm(pk) > 1e-9 * np.linalg.norm(uk):
                first[j] = k
                break
        else:
            raise MeshError(f"vertex {j}: every neighbour lies along the normal")
    return first


def _frames(v, faces, first):
    """Frames and the intermediates needed for backpropagation."""
    e1 = v[faces[:, 1]] - v[faces[:, 0]]
    e2 = v[faces[:, 2]] - v[faces[:, 0]]
    c = np.cross(e1, e2)
    N = np.zeros_like(v)
    for k in range(3):
        np.add.at(N, faces[:, k], c)
    nN = np.linalg.norm(N, axis=1)
    f1 = N / nN[:, None]
    u = v[first] - v
    ud = np.einsum("ij,ij->i", u, f1)
    p = u - ud[:, None] * f1
    np_ = np.linalg.norm(p, axis=1)
    f2 = p / np_[:, None]
    f3 = np.cross(f1, f2)
    return f1, f2, f3, dict(e1=e1, e2=e2, nN=nN, u=u, ud=ud, np=np_)


def local_frames(mesh: TriangleMesh, first=None) -> np.ndarray:
    """Per-vertex orthonormal frames, shape (m, 3, 3) with rows f1, f2, f3."""
    first = first_neighbors(mesh) if first is None else first
    f1, f2, f3, _ = _frames(mesh.vertices, mesh.faces, first)
    return np.stack([f1, f2, f3], axis=1)


@dataclass
class ShapeFeature:
    omegas: np.ndarray   # (m, 3)
    scale: float

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.omegas).ravel(), [self.scale]])

    @classmethod
    def from_vector(cls, x) -> "ShapeFeature":
        x = np.asarray(x, dtype=float)
        if (len(x) - 1) % 3:
            raise ShapeSpaceError("feature length must be 3m + 1")
        return cls(x[:-1].reshape(-1, 3), float(x[-1]))


def shape_feature(mesh: TriangleMesh, first=None, scale: float | None = None) -> ShapeFeature:
    frames = local_frames(mesh, first)
    delta = laplace_offsets(mesh)
    omegas = np.einsum("jkc,jc->jk", frames, delta)
    s = average_geodesic_distance(mesh) if scale is None else scale
    return ShapeFeature(omegas, float(s))


@dataclass
class ShapeSpace:
    mean: np.ndarray         # (d,)
    components: np.ndarray   # (c, d) orthonormal rows
    eigenvalues: np.ndarray  # (c,) descending variances
    retained_fraction: float
    total_variance: float

    @property
    def n_components(self) -> int:
        return len(self.eigenvalues)

    @property
    def dimension(self) -> int:
        return len(self.mean)

    def project(self, feature) -> np.ndarray:
        x = feature.vector() if isinstance(feature, ShapeFeature) else np.asarray(feature, dtype=float)
        if x.shape != self.mean.shape:
            raise ShapeSpaceError(f"feature length {x.shape} does not match space dimension {self.dimension}")
        return self.components @ (x - self.mean)

    def synthesize(self, z) -> ShapeFeature:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_components,):
            raise ShapeSpaceError(f"expected {self.n_components} coefficients")
        return ShapeFeature.from_vector(self.mean + self.components.T @ z)

    def mahalanobis(self, z) -> float:
        return mahalanobis(self, z)


def train_shape_space(features, retained_fraction: float = 0.70) -> ShapeSpace:
    """PCA keeping the fewest components whose variance share reaches ``retained_fraction``."""
    if not 0 < retained_fraction <= 1:
        raise ValueError("retained_fraction must lie in (0, 1]")
    X = np.array([f.vector() if isinstance(f, ShapeFeature) else np.asarray(f, float) for f in features])
    n = len(X)
    if n < 2:
        raise ShapeSpaceError("need at least two samples")
    mean = X.mean(axis=0)
    Xc = X - mean
    if n < X.shape[1]:
        # Gram-matrix route
        mu, A = np.linalg.eigh(Xc @ Xc.T)
        order = np.argsort(mu)[::-1]
        mu, A = mu[order], A[:, order]
        keep = mu > 1e-12 * max(mu[0], 0.0)
        if not np.any(keep) or mu[0] <= 0:
            raise ShapeSpaceError("degenerate training set: zero variance")
        mu, A = mu[keep], A[:, keep]
        comps = (Xc.T @ A / np.sqrt(mu)).T
    else:
        mu, V = np.linalg.eigh(Xc.T @ Xc)
        order = np.argsort(mu)[::-1]
        mu, V = mu[order], V[:, order]
        if mu[0] <= 0:
            raise ShapeSpaceError("degenerate training set: zero variance")
        keep = mu > 1e-12 * mu[0]
        mu, comps = mu[keep], V[:, keep].T
    var = mu / (n - 1)
    total = float(np.sum(Xc * Xc) / (n - 1))
    frac = np.cumsum(var) / total
    c = int(np.searchsorted(frac, retained_fraction - 1e-12) + 1)
    c = min(c, len(var))
    # re-orthonormalize against round-off
    Q, _ = np.linalg.qr(comps[:c].T)
    Q *= np.sign(np.sum(Q * comps[:c].T, axis=0))
    return ShapeSpace(mean, Q.T.copy(), var[:c].copy(), float(retained_fraction), total)


def mahalanobis(space: ShapeSpace, z) -> float:
    z = np.asarray(z, dtype=float)
    lam = space.eigenvalues
    if np.any((lam <= 0) & (z != 0)):
        raise ShapeSpaceError("nonzero coefficient on a zero-variance component")
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(lam > 0, z * z / lam, 0.0)
    return float(np.sqrt(q.sum()))


def clamp_to_ellipsoid(space: ShapeSpace, z, k: float = 3.0) -> np.ndarray:
    """Scale ``z`` toward the origin until its Mahalanobis norm is at most ``k``."""
    if k <= 0:
        raise ValueError("k must be positive")
    z = np.asarray(z, dtype=float)
    m = mahalanobis(space, z)
    if m <= k:
        return z.copy()
    return z * (k / m)


def mean_representative(zs, weights=None) -> np.ndarray:
    """Convex (optionally confidence-weighted) combination of coefficient vectors."""
    Z = np.atleast_2d(np.asarray(zs, dtype=float))
    if len(Z) == 0:
        raise ValueError("no coefficient vectors")
    w = np.ones(len(Z)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(Z),) or np.any(w < 0):
        raise ValueError("weights must be non-negative, one per frame")
    if w.sum() <= 0:
        raise ValueError("weights are all zero")
    return (w / w.sum()) @ Z


class HumanEnergy:
    """Reconstruction energy over flattened vertex coordinates, with gradient."""

    def __init__(self, mesh: TriangleMesh, target: ShapeFeature, first=None):
        self.faces = mesh.faces
        self.first = first_neighbors(mesh) if first is None else np.asarray(first)
        self.omegas = np.asarray(target.omegas, dtype=float)
        if self.omegas.shape != mesh.vertices.shape:
            raise ShapeSpaceError("target feature does not match the mesh vertex count")
        self.L = mesh.laplacian
        self.LT = self.L.T.tocsr()
        self.m = mesh.n_vertices

    def __call__(self, x):
        v = x.reshape(-1, 3)
        f1, f2, f3, c = _frames(v, self.faces, self.first)
        w = self.omegas
        h = w[:, :1] * f1 + w[:, 1:2] * f2 + w[:, 2:3] * f3
        r = h - self.L @ v
        energy = float(np.sum(r * r))
        g = 2.0 * r
        grad = -(self.LT @ g)
        gf1 = w[:, :1] * g + w[:, 2:3] * np.cross(f2, g)
        gf2 = w[:, 1:2] * g + w[:, 2:3] * np.cross(g, f1)
        # f2 = p / |p|, p = u - (u.f1) f1
        gp = (gf2 - f2 * np.einsum("ij,ij->i", f2, gf2)[:, None]) / c["np"][:, None]
        f1gp = np.einsum("ij,ij->i", f1, gp)
        gu = gp - f1 * f1gp[:, None]
        gf1 -= c["ud"][:, None] * gp + c["u"] * f1gp[:, None]
        np.add.at(grad, self.first, gu)
        grad -= gu
        # f1 = N / |N|, N_j = sum of incident face cross products
        gN = (gf1 - f1 * np.einsum("ij,ij->i", f1, gf1)[:, None]) / c["nN"][:, None]
        gc = gN[self.faces[:, 0]] + gN[self.faces[:, 1]] + gN[self.faces[:, 2]]
        ge1 = np.cross(c["e2"], gc)
        ge2 = np.cross(gc, c["e1"])
        np.add.at(grad, self.faces[:, 1], ge1)
        np.add.at(grad, self.faces[:, 2], ge2)
        np.add.at(grad, self.faces[:, 0], -(ge1 + ge2))
        return energy, grad.ravel()


def reconstruct_mesh(initial: TriangleMesh, target: ShapeFeature, first=None,
                     options: MinimizeOptions | None = None) -> tuple[TriangleMesh, float]:
    """Deform ``initial`` so its local Laplace coordinates approach ``target``.

    The scale entry of ``target`` is implied by the offsets' magnitudes and does
    not enter the energy.  Returns the mesh and the final energy.
    """
    energy = HumanEnergy(initial, target, first)
    opts = options or MinimizeOptions(max_iterations=3000, gtol=1e-12, ftol=1e-13)
    res = minimize(energy, initial.vertices.ravel(), opts)
    if not np.isfinite(res.value):
        raise ReconstructionError("reconstruction diverged", res.value, res.iterations)
    logger.debug("reconstruct_mesh: %s, E=%.3e after %d iterations", res.status, res.value, res.iterations)
    return initial.with_vertices(res.x.reshape(-1, 3)), res.value
