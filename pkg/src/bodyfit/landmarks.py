"""Tree-structured landmark model and per-frame landmark tracking.

Node potentials are Gaussians over geodesic-disk descriptors, edge
potentials Gaussians over landmark-to-landmark displacements in canonical
(isometry-invariant) space.  Labels are found by exact max-product on the
tree over small candidate sets taken around the previous frame's prediction.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .canonical import CanonicalForm, RigidTransform, canonical_form, procrustes_align
from .mesh import DEFAULT_RADII, TriangleMesh, fast_marching_geodesics, geodesic_disk_descriptor

logger = logging.getLogger(__name__)

DEFAULT_LANDMARKS = (
    "head_top", "neck",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)
DEFAULT_EDGES = (
    (1, 0), (1, 2), (1, 3), (2, 4), (4, 6), (3, 5), (5, 7),
    (1, 8), (1, 9), (8, 10), (10, 12), (9, 11), (11, 13),
)
CANDIDATE_COUNT = 200
REGULARIZATION = 1e-6
REGULARIZATION_FLOOR = 1e-12


class LandmarkError(ValueError):
    pass


class InferenceError(RuntimeError):
    def __init__(self, message, frame=None):
        super().__init__(message if frame is None else f"frame {frame}: {message}")
        self.frame = frame


class LandmarkTopology:
    """Landmark names and the tree of pairwise potentials.

    ``edges`` are (parent, child) pairs once the tree is rooted at ``root``;
    they are reoriented here if given the other way round.
    """

    def __init__(self, names, edges, root: int | None = None):
        self.names = tuple(str(n) for n in names)
        n = len(self.names)
        if n < 1:
            raise LandmarkError("topology needs at least one landmark")
        if len(set(self.names)) != n:
            raise LandmarkError("duplicate landmark names")
        E = [tuple(int(a) for a in e) for e in edges]
        if len(E) != n - 1:
            raise LandmarkError(f"a tree on {n} nodes has {n - 1} edges, got {len(E)}")
        adj = [[] for _ in range(n)]
        for a, b in E:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise LandmarkError(f"bad edge ({a}, {b})")
            adj[a].append(b)
            adj[b].append(a)
        self.root = int(E[0][0]) if root is None and E else int(root or 0)
        parent = np.full(n, -2)
        parent[self.root] = -1
        order = [self.root]
        queue = deque([self.root])
        while queue:
            a = queue.popleft()
            for b in sorted(adj[a]):
                if parent[b] == -2:
                    parent[b] = a
                    order.append(b)
                    queue.append(b)
        if len(order) != n:
            raise LandmarkError("landmark edges do not form a connected tree")
        self.parent = parent
        self.order = np.array(order)
        orient = {}
        for a, b in E:
            orient[(a, b)] = (a, b) if parent[b] == a else (b, a)
        self.edges = tuple(orient[e] for e in E)

    @classmethod
    def default(cls) -> "LandmarkTopology":
        return cls(DEFAULT_LANDMARKS, DEFAULT_EDGES)

    @property
    def n_nodes(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __eq__(self, other):
        return isinstance(other, LandmarkTopology) and self.names == other.names and self.edges == other.edges

    def __repr__(self):
        return f"LandmarkTopology({len(self.names)} nodes, root={self.names[self.root]!r})"


class GaussianPotential:
    """Multivariate normal log-density with a cached Cholesky factor."""

    def __init__(self, mean, covariance):
        self.mean = np.asarray(mean, dtype=float).copy()
        self.covariance = np.asarray(covariance, dtype=float).copy()
        d = len(self.mean)
        if self.covariance.shape != (d, d):
            raise LandmarkError("covariance shape does not match the mean")
        if not np.allclose(self.covariance, self.covariance.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.covariance).max())):
            raise LandmarkError("covariance is not symmetric")
        try:
            self._chol = np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            raise LandmarkError("covariance is not positive definite") from None
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        self.log_normalizer = -0.5 * (d * np.log(2.0 * np.pi) + logdet)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @classmethod
    def fit(cls, samples, rel_eps: float = REGULARIZATION) -> "GaussianPotential":
        """Sample mean and (n-1)-normalized covariance plus ``eps I``.

        ``eps = rel_eps * mean diagonal``, floored at 1e-12 so constant data
        still gives a proper density.
        """
        X = np.asarray(samples, dtype=float)
        if X.ndim != 2 or len(X) < 2:
            raise LandmarkError("need at least two samples to fit a Gaussian")
        mu = X.mean(axis=0)
        Xc = X - mu
        C = Xc.T @ Xc / (len(X) - 1)
        eps = max(rel_eps * float(np.mean(np.diag(C))), REGULARIZATION_FLOOR)
        C = 0.5 * (C + C.T) + eps * np.eye(X.shape[1])
        return cls(mu, C)

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        diff = (x - self.mean).reshape(-1, self.dim)
        y = np.linalg.solve(self._chol, diff.T)
        q = np.sum(y * y, axis=0)
        out = self.log_normalizer - 0.5 * q
        return out.reshape(x.shape[:-1])


@dataclass
class LandmarkModel:
    topology: LandmarkTopology
    node_potentials: list
    edge_potentials: list            # aligned with topology.edges
    reference_positions: np.ndarray  # (n, 3) canonical landmark positions
    radii: np.ndarray = field(default_factory=lambda: DEFAULT_RADII.copy())

    def __post_init__(self):
        n = self.topology.n_nodes
        if len(self.node_potentials) != n or len(self.edge_potentials) != n - 1:
            raise LandmarkError("potential count does not match the topology")
        if any(p.dim != len(self.radii) for p in self.node_potentials):
            raise LandmarkError("node potentials must match the descriptor length")
        if any(p.dim != 3 for p in self.edge_potentials):
            raise LandmarkError("edge potentials must be 3-D")
        self.reference_positions = np.asarray(self.reference_positions, dtype=float)


@dataclass
class LandmarkAssignment:
    indices: np.ndarray
    positions: np.ndarray
    log_probability: float


class FrameGeometry:
    """A frame mesh with its canonical form and a lazily filled descriptor cache."""

    def __init__(self, mesh: TriangleMesh, radii=DEFAULT_RADII, anchor_count: int = 200,
                 canonical: CanonicalForm | None = None):
        self.mesh = mesh
        self.radii = np.asarray(radii, dtype=float)
        self.anchor_count = anchor_count
        self._canonical = canonical
        self._cache: dict[int, np.ndarray] = {}
        self._stop = float(self.radii[-1] + 3.0 * mesh.max_edge_length)

    @property
    def canonical(self) -> CanonicalForm:
        if self._canonical is None:
            self._canonical = canonical_form(self.mesh, self.anchor_count)
        return self._canonical

    @property
    def usable(self) -> np.ndarray:
        """Vertices with a finite canonical position."""
        return np.all(np.isfinite(self.canonical.coords), axis=1)

    def descriptors(self, indices) -> np.ndarray:
        out = np.empty((len(indices), len(self.radii)))
        for i, v in enumerate(np.asarray(indices, dtype=int)):
            d = self._cache.get(v)
            if d is None:
                dist = fast_marching_geodesics(self.mesh, v, self._stop)
                d = geodesic_disk_descriptor(self.mesh, v, self.radii, dist=dist)
                self._cache[int(v)] = d
            out[i] = d
        return out


def train_landmark_model(meshes, landmark_indices, topology: LandmarkTopology | None = None,
                         radii=DEFAULT_RADII, anchor_count: int = 200, frames=None) -> LandmarkModel:
    """Fit node and edge potentials from registered scans with known landmarks.

    Canonical forms of all scans are aligned to the first scan's one with a
    landmark Procrustes fit (reflection allowed); the stored reference
    positions are the mean of the aligned landmark positions.
    """
    topology = topology or LandmarkTopology.default()
    L = np.asarray(landmark_indices, dtype=int)
    if len(meshes) < 2:
        raise LandmarkError("need at least two training scans")
    if L.shape != (len(meshes), topology.n_nodes):
        raise LandmarkError(f"landmark index array must be ({len(meshes)}, {topology.n_nodes})")
    frames = frames or [FrameGeometry(m, radii, anchor_count) for m in meshes]
    desc = []
    positions = []
    for s, fg in enumerate(frames):
        if np.any(L[s] < 0) or np.any(L[s] >= fg.mesh.n_vertices):
            raise LandmarkError(f"scan {s}: landmark index out of range")
        desc.append(fg.descriptors(L[s]))
        P = fg.canonical.coords[L[s]]
        if not np.all(np.isfinite(P)):
            raise LandmarkError(f"scan {s}: landmark outside the canonical form")
        positions.append(P)
    aligned = [positions[0]]
    for P in positions[1:]:
        tr, _ = procrustes_align(P, positions[0], allow_reflection=True)
        aligned.append(tr.apply(P))
    desc = np.array(desc)        # (S, n, 20)
    aligned = np.array(aligned)  # (S, n, 3)
    nodes = [GaussianPotential.fit(desc[:, j]) for j in range(topology.n_nodes)]
    edges = [GaussianPotential.fit(aligned[:, k] - aligned[:, j]) for j, k in topology.edges]
    return LandmarkModel(topology, nodes, edges, aligned.mean(axis=0), np.asarray(radii, dtype=float))


def candidate_labels(mesh: TriangleMesh, positions, k: int = CANDIDATE_COUNT, allowed=None) -> list:
    """The ``k`` vertices nearest each position, as sorted index arrays.

    ``allowed`` masks the vertices that may be chosen; fewer than ``k`` of
    them means all are returned.
    """
    P = np.asarray(positions, dtype=float)
    if not np.all(np.isfinite(P)):
        raise LandmarkError("previous landmark positions must be finite")
    pool = np.arange(mesh.n_vertices) if allowed is None else np.flatnonzero(allowed)
    if len(pool) == 0:
        raise LandmarkError("frame has no usable vertices")
    if len(pool) <= k:
        return [pool.copy() for _ in range(len(P))]
    _, nn = cKDTree(mesh.vertices[pool]).query(P, k=k)
    nn = np.atleast_2d(nn).reshape(len(P), k)
    return [np.sort(pool[row]) for row in nn]


def max_product(node_scores, edge_scores, topology: LandmarkTopology):
    """Exact MAP labelling of a tree by two-pass max-product in log space.

    ``node_scores[j]`` is a (c_j,) array, ``edge_scores[e]`` a (c_parent, c_child)
    array for ``topology.edges[e]``.  Ties resolve to the lowest candidate
    position.  Returns the chosen positions per node and the total score.
    """
    n = topology.n_nodes
    edge_of = {child: e for e, (_, child) in enumerate(topology.edges)}
    belief = [np.asarray(s, dtype=float).copy() for s in node_scores]
    back = [None] * n
    for c in topology.order[::-1][:-1]:
        e = edge_of[c]
        M = np.asarray(edge_scores[e], dtype=float) + belief[c][None, :]
        back[c] = np.argmax(M, axis=1)
        belief[topology.parent[c]] += M[np.arange(len(M)), back[c]]
    root = topology.root
    labels = np.zeros(n, dtype=int)
    labels[root] = int(np.argmax(belief[root]))
    best = float(belief[root][labels[root]])
    if not np.isfinite(best):
        raise InferenceError("no assignment with finite probability")
    for c in topology.order[1:]:
        labels[c] = back[c][labels[topology.parent[c]]]
    return labels, best


def _scores(model: LandmarkModel, frame: FrameGeometry, candidates, alignment: RigidTransform):
    Y = [alignment.apply(frame.canonical.coords[c]) for c in candidates]
    nodes = [model.node_potentials[j].logpdf(frame.descriptors(c)) for j, c in enumerate(candidates)]
    edges = [model.edge_potentials[e].logpdf(Y[k][None, :, :] - Y[j][:, None, :])
             for e, (j, k) in enumerate(model.topology.edges)]
    return nodes, edges


def joint_log_probability(model: LandmarkModel, frame: FrameGeometry, indices, alignment: RigidTransform) -> float:
    """Sum of node and edge log-densities for one full assignment."""
    cand = [np.array([i]) for i in np.asarray(indices, dtype=int)]
    nodes, edges = _scores(model, frame, cand, alignment)
    return float(sum(s[0] for s in nodes) + sum(s[0, 0] for s in edges))


def max_product_infer(model: LandmarkModel, frame: FrameGeometry, candidates, alignment: RigidTransform) -> LandmarkAssignment:
    cand = [np.unique(np.asarray(c, dtype=int)) for c in candidates]
    if len(cand) != model.topology.n_nodes or any(len(c) == 0 for c in cand):
        raise InferenceError("every landmark needs at least one candidate")
    nodes, edges = _scores(model, frame, cand, alignment)
    labels, score = max_product(nodes, edges, model.topology)
    idx = np.array([c[l] for c, l in zip(cand, labels)])
    return LandmarkAssignment(idx, frame.mesh.vertices[idx].copy(), score)


def canonical_alignment(model: LandmarkModel, frame: FrameGeometry, indices) -> RigidTransform:
    """Map the frame's canonical space onto the model's via landmark Procrustes."""
    tr, _ = procrustes_align(frame.canonical.coords[np.asarray(indices)], model.reference_positions,
                             allow_reflection=True)
    return tr


def snap_to_vertices(mesh: TriangleMesh, points, allowed=None) -> np.ndarray:
    pool = np.arange(mesh.n_vertices) if allowed is None else np.flatnonzero(allowed)
    _, nn = cKDTree(mesh.vertices[pool]).query(np.asarray(points, dtype=float))
    return pool[nn]


def track_landmarks(model: LandmarkModel, frames, user_landmarks, k: int = CANDIDATE_COUNT,
                    anchor_count: int = 200) -> list:
    """Landmarks for every frame, seeded by user landmarks on the first one.

    ``frames`` holds meshes or ``FrameGeometry`` objects; invalid vertices
    must already be removed (see ``TriangleMesh.compacted``).
    ``user_landmarks`` is an index array or an (n, 3) position array.
    """
    geoms = [f if isinstance(f, FrameGeometry) else FrameGeometry(f, model.radii, anchor_count) for f in frames]
    if not geoms:
        return []
    first = geoms[0]
    user = np.asarray(user_landmarks)
    n = model.topology.n_nodes
    if user.ndim == 2 and user.shape == (n, 3):
        idx = snap_to_vertices(first.mesh, user, first.usable)
    elif user.shape == (n,) and np.issubdtype(user.dtype, np.integer):
        idx = user.astype(int)
        if np.any(idx < 0) or np.any(idx >= first.mesh.n_vertices):
            raise LandmarkError("user landmark index out of range")
    else:
        raise LandmarkError(f"user landmarks must be {n} indices or an ({n}, 3) array")
    align = canonical_alignment(model, first, idx)
    out = [LandmarkAssignment(idx, first.mesh.vertices[idx].copy(), joint_log_probability(model, first, idx, align))]
    for i, fg in enumerate(geoms[1:], start=2):
        try:
            prev = out[-1].positions
            usable = fg.usable
            anchor_idx = snap_to_vertices(fg.mesh, prev, usable)
            align = canonical_alignment(model, fg, anchor_idx)
            cands = candidate_labels(fg.mesh, prev, k, usable)
            out.append(max_product_infer(model, fg, cands, align))
        except (InferenceError, LandmarkError, ValueError) as exc:
            raise InferenceError(str(exc), frame=i) from exc
        logger.debug("frame %d: log-probability %.3f", i, out[-1].log_probability)
    return out
