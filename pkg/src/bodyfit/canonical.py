"""Isometry-invariant canonical forms and rigid point-set alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh, farthest_point_sampling, MeshError


class DegenerateGeometryError(MeshError):
    pass


@dataclass
class CanonicalForm:
    coords: np.ndarray          # (n, 3), NaN for vertices unreachable from the anchors
    sample_indices: np.ndarray  # anchor vertex indices
    eigenvalues: np.ndarray     # the three MDS eigenvalues kept

    @property
    def anchor_coords(self) -> np.ndarray:
        return self.coords[self.sample_indices]


def classical_mds(sq_dist: np.ndarray, dim: int = 3):
    """Classical MDS of a squared-distance matrix.

    Returns ``(coords, eigenvalues, eigenvectors)``.  Negative eigenvalues are
    clamped to zero; eigenvector signs make the first nonzero entry positive.
    """
    k = len(sq_dist)
    J = np.eye(k) - 1.0 / k
    B = -0.5 * J @ sq_dist @ J
    B = 0.5 * (B + B.T)
    w, V = np.linalg.eigh(B)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    w = np.maximum(w, 0.0)
    if np.count_nonzero(w[:dim] > 1e-12 * max(w[0], 1e-300)) < dim:
        raise DegenerateGeometryError("degenerate intrinsic geometry")
    w, V = w[:dim], V[:, :dim].copy()
    for i in range(dim):
        nz = np.flatnonzero(np.abs(V[:, i]) > 1e-12)
        if V[nz[0], i] < 0:
            V[:, i] = -V[:, i]
    return V * np.sqrt(w), w, V


def canonical_form(mesh: TriangleMesh, anchor_count: int = 200, seed_vertex: int | None = None) -> CanonicalForm:
    """3-D canonical form: MDS on FPS anchors, Nystrom extension to the rest.

    ``seed_vertex`` defaults to the lowest-index vertex of the largest
    connected component, so holes or stray pieces do not capture the anchors.
    """
    if anchor_count < 4:
        raise ValueError("anchor_count must be >= 4")
    if seed_vertex is None:
        seed_vertex = int(np.flatnonzero(mesh.largest_component())[0])
    anchors, fields = farthest_point_sampling(mesh, anchor_count, seed_vertex, return_distances=True)
    sq = fields[:, anchors] ** 2
    sq = 0.5 * (sq + sq.T)
    _, w, V = classical_mds(sq)
    # landmark-MDS out-of-sample map; reproduces the anchor embedding exactly
    pinv = V / np.sqrt(w)
    with np.errstate(invalid="ignore"):
        coords = -0.5 * (fields**2 - sq.mean(axis=1, keepdims=True)).T @ pinv
    coords[~np.all(np.isfinite(fields), axis=0)] = np.nan
    # marching is not exactly symmetric; anchors keep their MDS coordinates
    coords[anchors] = V * np.sqrt(w)
    return CanonicalForm(coords, anchors, w)


@dataclass
class RigidTransform:
    rotation: np.ndarray     # orthogonal 3x3, det may be -1 when reflections are allowed
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    @property
    def is_reflection(self) -> bool:
        return np.linalg.det(self.rotation) < 0


def procrustes_align(source, target, allow_reflection: bool = False) -> tuple[RigidTransform, float]:
    """Least-squares orthogonal alignment of ``source`` onto ``target``.

    Returns the transform and the residual ``sqrt(sum ||T(s_i) - t_i||^2)``.
    """
    S = np.asarray(source, dtype=float)
    T = np.asarray(target, dtype=float)
    if S.shape != T.shape or S.ndim != 2 or len(S) < 3:
        raise ValueError("need matching (n>=3, d) point sets")
    cs, ct = S.mean(axis=0), T.mean(axis=0)
    S0, T0 = S - cs, T - ct
    sv = np.linalg.svd(S0, compute_uv=False)
    if sv[1] <= 1e-10 * max(sv[0], 1e-300):
        raise DegenerateGeometryError("collinear or degenerate point configuration")
    U, _, Vt = np.linalg.svd(S0.T @ T0)
    R = Vt.T @ U.T
    if not allow_reflection and np.linalg.det(R) < 0:
        D = np.eye(S.shape[1])
        D[-1, -1] = -1.0
        R = Vt.T @ D @ U.T
    tr = RigidTransform(R, ct - R @ cs)
    residual = float(np.sqrt(np.sum((tr.apply(S) - T) ** 2)))
    return tr, residual


def mds_stress(coords, distances) -> float:
    """Normalized stress ``sqrt(sum (|x_i - x_j| - d_ij)^2 / sum d_ij^2)``."""
    X = np.asarray(coords)
    D = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    d = np.asarray(distances)
    return float(np.sqrt(np.sum((D - d) ** 2) / np.sum(d**2)))
