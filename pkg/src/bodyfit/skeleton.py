"""Rigged template, blend skinning and skeleton-based posture fitting.

Posture parameters pack into 55 numbers: the root's rotation vector (3),
scale (1) and translation (3), followed by one rotation vector per remaining
bone (16 x 3).  A rotation vector is the rotation axis times the angle.

Transform composition (all 4x4, column vectors)::

    B_root = T(t) . T(h_root) . R_root . S(s) . T(-h_root)
    B_k    = B_parent(k) . T(h_k) . R_k . T(-h_k)

where ``h`` is the rest head position of each bone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh
from .optimize import MinimizeOptions, minimize
from .rotations import rotvec_matrix, rotvec_matrix_derivatives

logger = logging.getLogger(__name__)

BONE_NAMES = (
    "pelvis", "spine", "chest", "neck", "head",
    "l_upper_arm", "l_forearm", "l_hand",
    "r_upper_arm", "r_forearm", "r_hand",
    "l_thigh", "l_shin", "l_foot",
    "r_thigh", "r_shin", "r_foot",
)
BONE_PARENTS = (-1, 0, 1, 2, 3, 2, 5, 6, 2, 8, 9, 0, 11, 12, 0, 14, 15)
N_BONES = 17
N_PARAMS = 7 + 3 * (N_BONES - 1)


class PostureError(RuntimeError):
    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params


@dataclass
class Skeleton:
    names: tuple
    parents: np.ndarray
    heads: np.ndarray
    tails: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.heads = np.asarray(self.heads, dtype=float).reshape(-1, 3)
        self.tails = np.asarray(self.tails, dtype=float).reshape(-1, 3)
        n = len(self.parents)
        if n != N_BONES or len(self.names) != n or len(self.heads) != n or len(self.tails) != n:
            raise ValueError(f"skeleton must have exactly {N_BONES} bones")
        if self.parents[0] != -1 or np.count_nonzero(self.parents < 0) != 1:
            raise ValueError("skeleton needs a single root at index 0")
        if np.any(self.parents[1:] >= np.arange(1, n)):
            raise ValueError("bones must be in depth-first order (parent before child)")

    @property
    def children(self) -> list[list[int]]:
        out = [[] for _ in range(len(self.parents))]
        for k, p in enumerate(self.parents):
            if p >= 0:
                out[p].append(k)
        return out

    def subtree(self, b: int) -> list[int]:
        """Bones in the subtree of ``b`` (including ``b``), in DFS order."""
        out = [b]
        for k in range(b + 1, len(self.parents)):
            if self.parents[k] in out:
                out.append(k)
        return out


@dataclass
class PostureParams:
    rotvecs: np.ndarray = field(default_factory=lambda: np.zeros((N_BONES, 3)))
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotvecs = np.asarray(self.rotvecs, dtype=float).reshape(N_BONES, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.scale = float(self.scale)

    @classmethod
    def identity(cls) -> "PostureParams":
        return cls()

    def pack(self) -> np.ndarray:
        return np.concatenate([self.rotvecs[0], [self.scale], self.translation, self.rotvecs[1:].ravel()])

    @classmethod
    def unpack(cls, x) -> "PostureParams":
        x = np.asarray(x, dtype=float)
        if x.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} posture parameters, got {x.shape}")
        rot = np.vstack([x[:3], x[7:].reshape(N_BONES - 1, 3)])
        return cls(rot, x[3], x[4:7])

    def axis_angle(self, k: int) -> tuple[np.ndarray, float]:
        v = self.rotvecs[k]
        angle = float(np.linalg.norm(v))
        return v / max(angle, 1e-12), angle


@dataclass
class RiggedTemplate:
    mesh: TriangleMesh
    skeleton: Skeleton
    weights: np.ndarray          # (m, 17), rows sum to one
    landmarks: np.ndarray        # template landmark vertex indices

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.landmarks = np.asarray(self.landmarks, dtype=np.int64)
        if self.weights.shape != (self.mesh.n_vertices, N_BONES):
            raise ValueError("weights must be (vertex count, 17)")
        if np.any(self.weights < -1e-12) or not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("rigging weights must be non-negative and sum to one per vertex")
        if np.any(self.landmarks < 0) or np.any(self.landmarks >= self.mesh.n_vertices):
            raise ValueError("landmark index out of range")


def compute_mean_template(meshes) -> TriangleMesh:
    """Vertex-wise mean of registered meshes (identical face lists required)."""
    meshes = list(meshes)
    if not meshes:
        raise ValueError("need at least one mesh")
    faces = meshes[0].faces
    if any(m.faces.shape != faces.shape or np.any(m.faces != faces) for m in meshes):
        raise ValueError("meshes are not registered (face lists differ)")
    return meshes[0].with_vertices(np.mean([m.vertices for m in meshes], axis=0))


def _affine(R, t):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def local_transforms(skeleton: Skeleton, params: PostureParams) -> np.ndarray:
    if params.scale <= 0:
        raise ValueError("posture scale must be positive")
    L = np.empty((N_BONES, 4, 4))
    h = skeleton.heads
    R0 = rotvec_matrix(params.rotvecs[0])
    sR = params.scale * R0
    L[0] = _affine(sR, params.translation + h[0] - sR @ h[0])
    for k in range(1, N_BONES):
        R = rotvec_matrix(params.rotvecs[k])
        L[k] = _affine(R, h[k] - R @ h[k])
    return L


def global_transforms(skeleton: Skeleton, params: PostureParams) -> np.ndarray:
    """Global 4x4 bone transforms ``B_k`` (17, 4, 4)."""
    L = local_transforms(skeleton, params)
    B = np.empty_like(L)
    for k in range(N_BONES):
        p = skeleton.parents[k]
        B[k] = L[k] if p < 0 else B[p] @ L[k]
    return B


def skin_points(points, weights, B) -> np.ndarray:
    """Linear blend skinning ``sum_k w_jk B_k x_j``."""
    x = np.asarray(points, dtype=float)
    # blend the 3x4 bone matrices per vertex, then apply once
    M = (np.asarray(weights) @ B[:, :3, :].reshape(len(B), 12)).reshape(-1, 3, 4)
    return np.einsum("jab,jb->ja", M[:, :, :3], x) + M[:, :, 3]


def skin(template: RiggedTemplate, B) -> np.ndarray:
    return skin_points(template.mesh.vertices, template.weights, B)


def posed_mesh(template: RiggedTemplate, params: PostureParams) -> TriangleMesh:
    return template.mesh.with_vertices(skin(template, global_transforms(template.skeleton, params)))


class SkinningEnergy:
    """``E(b) = sum_j || sum_k w_jk B_k(b) x_j - y_j ||^2`` with analytic gradient.

    Serves both the landmark energy (x = template landmarks) and the
    nearest-neighbour energy (x = all template vertices, y = correspondences).
    """

    def __init__(self, skeleton: Skeleton, points, weights, targets):
        self.skeleton = skeleton
        self.x = np.asarray(points, dtype=float)
        self.w = np.asarray(weights, dtype=float)
        self.y = np.asarray(targets, dtype=float)
        self.xh = np.column_stack([self.x, np.ones(len(self.x))])

    def __call__(self, vec):
        params = PostureParams.unpack(vec)
        if params.scale <= 0 or not np.all(np.isfinite(vec)):
            return np.inf, np.zeros_like(vec)
        sk = self.skeleton
        h = sk.heads
        rot = []
        drot = []
        for k in range(N_BONES):
            R, dR = rotvec_matrix_derivatives(params.rotvecs[k])
            rot.append(R)
            drot.append(dR)
        L = np.empty((N_BONES, 4, 4))
        s = params.scale
        L[0] = _affine(s * rot[0], params.translation + h[0] - s * rot[0] @ h[0])
        for k in range(1, N_BONES):
            L[k] = _affine(rot[k], h[k] - rot[k] @ h[k])
        B = np.empty_like(L)
        for k in range(N_BONES):
            p = sk.parents[k]
            B[k] = L[k] if p < 0 else B[p] @ L[k]

        res = skin_points(self.x, self.w, B) - self.y
        energy = float(np.sum(res * res))

        G = np.zeros((N_BONES, 4, 4))
        outer = (2.0 * res)[:, :, None] * self.xh[:, None, :]
        G[:, :3, :] = (self.w.T @ outer.reshape(len(res), 12)).reshape(N_BONES, 3, 4)

        # acc_b = sum over the subtree of G_k (L chain from b to k)^T, gathered leaves-first
        acc = G.copy()
        for k in range(N_BONES - 1, 0, -1):
            acc[sk.parents[k]] += acc[k] @ L[k].T
        grad = np.zeros(N_PARAMS)
        for b in range(N_BONES):
            P = np.eye(4) if sk.parents[b] < 0 else B[sk.parents[b]]
            H = P.T @ acc[b]
            Hr = H[:3, :3]
            ht = H[:3, 3]
            if b == 0:
                for i in range(3):
                    dR = s * drot[0][i]
                    grad[i] = np.sum(Hr * dR) + ht.dot(-dR @ h[0])
                grad[3] = np.sum(Hr * rot[0]) + ht.dot(-rot[0] @ h[0])
                grad[4:7] = ht
            else:
                off = 7 + 3 * (b - 1)
                for i in range(3):
                    dR = drot[b][i]
                    grad[off + i] = np.sum(Hr * dR) + ht.dot(-dR @ h[b])
        return energy, grad


def fit_posture_landmarks(template: RiggedTemplate, frame_landmarks, init: PostureParams | None = None,
                          options: MinimizeOptions | None = None) -> tuple[PostureParams, float]:
    """Minimize the landmark energy over all 55 posture parameters."""
    init = init or PostureParams.identity()
    y = np.asarray(frame_landmarks, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("frame landmarks must be finite")
    li = template.landmarks
    energy = SkinningEnergy(template.skeleton, template.mesh.vertices[li], template.weights[li], y)
    res = minimize(energy, init.pack(), options or MinimizeOptions(max_iterations=500))
    if not np.isfinite(res.value):
        raise PostureError("landmark posture fit diverged", init)
    return PostureParams.unpack(res.x), res.value


def fit_posture_nn(template: RiggedTemplate, frame, init: PostureParams, outer_iters: int = 10,
                   rel_tol: float = 1e-3, options: MinimizeOptions | None = None):
    """ICP-style posture refinement against all frame points.

    ``frame`` is a :class:`TriangleMesh` (valid vertices only are used) or an
    (n, 3) point array.  Returns ``(params, energy, history)`` where history
    holds the energy with fresh correspondences at each outer iteration.
    """
    pts = frame.vertices[frame.valid] if isinstance(frame, TriangleMesh) else np.asarray(frame, dtype=float)
    if len(pts) == 0:
        raise ValueError("empty frame")
    tree = cKDTree(pts)
    opts = options or MinimizeOptions(max_iterations=200)
    x = template.mesh.vertices
    params = init
    history = []
    for it in range(outer_iters):
        posed = skin(template, global_transforms(template.skeleton, params))
        dist, nn = tree.query(posed)
        e_fresh = float(np.sum(dist**2))
        history.append(e_fresh)
        if it > 0 and (history[-2] - e_fresh) <= rel_tol * max(history[-2], 1e-300):
            break
        energy = SkinningEnergy(template.skeleton, x, template.weights, pts[nn])
        res = minimize(energy, params.pack(), opts)
        if not np.isfinite(res.value):
            raise PostureError("nearest-neighbour posture fit diverged", params)
        params = PostureParams.unpack(res.x)
    else:
        posed = skin(template, global_transforms(template.skeleton, params))
        history.append(float(np.sum(tree.query(posed)[0] ** 2)))
    return params, history[-1], history


def point_segment_distance(points, a, b) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def fallback_rigging_weights(mesh: TriangleMesh, skeleton: Skeleton, nearest: int = 4,
                             smoothing_passes: int = 10) -> np.ndarray:
    """Inverse-square distance weights over the nearest bones, then one-ring smoothing.

    Vertices lying on a bone segment get weight one on that bone and are kept
    fixed while the others are smoothed.
    """
    x = mesh.vertices
    D = np.column_stack([point_segment_distance(x, skeleton.heads[k], skeleton.tails[k]) for k in range(N_BONES)])
    W = np.zeros_like(D)
    order = np.argsort(D, axis=1, kind="stable")[:, :nearest]
    rows = np.arange(len(x))[:, None]
    dsel = D[rows, order]
    on_bone = dsel[:, 0] < 1e-12
    with np.errstate(divide="ignore"):
        inv = 1.0 / dsel**2
    inv[on_bone] = 0.0
    inv[on_bone, 0] = 1.0
    W[rows, order] = inv
    W /= W.sum(axis=1, keepdims=True)
    if smoothing_passes:
        A = mesh.laplacian.copy()
        A.setdiag(0)
        A.eliminate_zeros()
        A.data[:] = 1.0
        deg = np.asarray(A.sum(axis=1)).ravel()
        free = ~on_bone
        for _ in range(smoothing_passes):
            Wn = (W + A @ W) / (1.0 + deg)[:, None]
            W[free] = Wn[free]
    W /= W.sum(axis=1, keepdims=True)
    return W
