"""Synthetic registered humanoids, motion curves and scan corruptions.

The body is the smooth union of tapered capsules, meshed once with marching
cubes at the base parameters.  Every other parameter setting moves the same
vertices (radial scaling of each part about its axis, blended by part
proximity, then a uniform height scale), so all generated bodies share one
connectivity and correspond vertex by vertex.

Axes: z up, the body faces -y, its left side is +x, feet rest on z = 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .landmarks import DEFAULT_LANDMARKS
from .mesh import TriangleMesh, average_edge_length, bounding_ball_radius, fast_marching_geodesics, vertex_normals
from .skeleton import BONE_NAMES, BONE_PARENTS, N_BONES, PostureParams, RiggedTemplate, Skeleton, \
    fallback_rigging_weights, global_transforms, posed_mesh

logger = logging.getLogger(__name__)


class SynthError(ValueError):
    pass


# name, start, end, start radius, end radius, girth group
_PARTS = (
    ("torso", (0.0, 0.0, 0.92), (0.0, 0.0, 1.40), 0.15, 0.15, "torso"),
    ("hips", (-0.09, 0.0, 0.93), (0.09, 0.0, 0.93), 0.12, 0.12, "torso"),
    ("shoulders", (-0.16, 0.0, 1.43), (0.16, 0.0, 1.43), 0.075, 0.075, "torso"),
    ("neck", (0.0, 0.0, 1.45), (0.0, 0.0, 1.62), 0.055, 0.055, None),
    ("head", (0.0, 0.0, 1.70), (0.0, 0.0, 1.76), 0.095, 0.095, None),
    ("l_upper_arm", (0.19, 0.0, 1.42), (0.36, 0.0, 1.18), 0.055, 0.047, "limb"),
    ("l_forearm", (0.36, 0.0, 1.18), (0.50, 0.0, 0.96), 0.045, 0.038, "limb"),
    ("l_hand", (0.50, 0.0, 0.96), (0.56, 0.0, 0.84), 0.036, 0.036, None),
    ("r_upper_arm", (-0.19, 0.0, 1.42), (-0.36, 0.0, 1.18), 0.055, 0.047, "limb"),
    ("r_forearm", (-0.36, 0.0, 1.18), (-0.50, 0.0, 0.96), 0.045, 0.038, "limb"),
    ("r_hand", (-0.50, 0.0, 0.96), (-0.56, 0.0, 0.84), 0.036, 0.036, None),
    ("l_thigh", (0.10, 0.0, 0.92), (0.13, 0.0, 0.50), 0.085, 0.06, "limb"),
    ("l_shin", (0.13, 0.0, 0.50), (0.15, 0.0, 0.09), 0.056, 0.042, "limb"),
    ("l_foot", (0.15, 0.0, 0.045), (0.15, -0.13, 0.04), 0.045, 0.038, None),
    ("r_thigh", (-0.10, 0.0, 0.92), (-0.13, 0.0, 0.50), 0.085, 0.06, "limb"),
    ("r_shin", (-0.13, 0.0, 0.50), (-0.15, 0.0, 0.09), 0.056, 0.042, "limb"),
    ("r_foot", (-0.15, 0.0, 0.045), (-0.15, -0.13, 0.04), 0.045, 0.038, None),
)

# rest bone segments (head, tail), in BONE_NAMES order
_BONES = {
    "pelvis": ((0.0, 0.0, 0.95), (0.0, 0.0, 1.05)),
    "spine": ((0.0, 0.0, 1.05), (0.0, 0.0, 1.25)),
    "chest": ((0.0, 0.0, 1.25), (0.0, 0.0, 1.45)),
    "neck": ((0.0, 0.0, 1.45), (0.0, 0.0, 1.62)),
    "head": ((0.0, 0.0, 1.62), (0.0, 0.0, 1.85)),
    "l_upper_arm": ((0.19, 0.0, 1.42), (0.36, 0.0, 1.18)),
    "l_forearm": ((0.36, 0.0, 1.18), (0.50, 0.0, 0.96)),
    "l_hand": ((0.50, 0.0, 0.96), (0.56, 0.0, 0.84)),
    "r_upper_arm": ((-0.19, 0.0, 1.42), (-0.36, 0.0, 1.18)),
    "r_forearm": ((-0.36, 0.0, 1.18), (-0.50, 0.0, 0.96)),
    "r_hand": ((-0.50, 0.0, 0.96), (-0.56, 0.0, 0.84)),
    "l_thigh": ((0.10, 0.0, 0.92), (0.13, 0.0, 0.50)),
    "l_shin": ((0.13, 0.0, 0.50), (0.15, 0.0, 0.09)),
    "l_foot": ((0.15, 0.0, 0.09), (0.15, -0.13, 0.04)),
    "r_thigh": ((-0.10, 0.0, 0.92), (-0.13, 0.0, 0.50)),
    "r_shin": ((-0.13, 0.0, 0.50), (-0.15, 0.0, 0.09)),
    "r_foot": ((-0.15, 0.0, 0.09), (-0.15, -0.13, 0.04)),
}

# anatomical site points; the nearest base-mesh vertex becomes the landmark
_SITES = {
    "head_top": (0.0, 0.0, 1.95),
    "neck": (0.0, -0.15, 1.54),
    "l_shoulder": (0.22, 0.0, 1.62),
    "r_shoulder": (-0.22, 0.0, 1.62),
    "l_elbow": (0.48, 0.0, 1.25),
    "r_elbow": (-0.48, 0.0, 1.25),
    "l_wrist": (0.62, 0.0, 1.0),
    "r_wrist": (-0.62, 0.0, 1.0),
    "l_hip": (0.32, 0.0, 0.92),
    "r_hip": (-0.32, 0.0, 0.92),
    "l_knee": (0.13, -0.25, 0.50),
    "r_knee": (-0.13, -0.25, 0.50),
    "l_ankle": (0.30, 0.0, 0.10),
    "r_ankle": (-0.30, 0.0, 0.10),
}

# pairs of parts that must stay apart (name, name, minimum surface gap)
_CLEARANCE = (
    ("l_forearm", "torso", 0.01), ("r_forearm", "torso", 0.01),
    ("l_hand", "hips", 0.01), ("r_hand", "hips", 0.01),
    ("l_shin", "r_shin", 0.01), ("l_foot", "r_foot", 0.01),
)

BLEND = 0.015
DEFAULT_RESOLUTION = 0.025


@dataclass(frozen=True)
class SynthBodyParams:
    """Latent body shape: overall height scale and torso / limb girth factors.

    Ranges: ``height_scale`` in [0.85, 1.15], ``torso_girth`` in [0.8, 1.3],
    ``limb_girth`` in [0.8, 1.2].
    """

    height_scale: float = 1.0
    torso_girth: float = 1.0
    limb_girth: float = 1.0
    seed: int = 0

    RANGES = {"height_scale": (0.85, 1.15), "torso_girth": (0.8, 1.3), "limb_girth": (0.8, 1.2)}

    def validate(self):
        for name, (lo, hi) in self.RANGES.items():
            v = getattr(self, name)
            if not (lo <= v <= hi):
                raise SynthError(f"{name}={v} outside [{lo}, {hi}]")

    @classmethod
    def random(cls, rng, seed: int = 0) -> "SynthBodyParams":
        rng = np.random.default_rng(rng)
        vals = {k: float(rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo))) for k, (lo, hi) in cls.RANGES.items()}
        return cls(seed=seed, **vals)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _segment_distance(x, a, b):
    """Distance to segment ``ab`` and the clamped segment parameter."""
    ab = b - a
    t = np.clip((x - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(x - (a + t[:, None] * ab), axis=1), t


def _part_distances(x):
    """Signed distance to each tapered capsule (n, parts) and axis parameters."""
    D = np.empty((len(x), len(_PARTS)))
    T = np.empty_like(D)
    for i, (_, a, b, ra, rb, _) in enumerate(_PARTS):
        d, t = _segment_distance(x, np.array(a), np.array(b))
        D[:, i] = d - (ra + t * (rb - ra))
        T[:, i] = t
    return D, T


def _implicit(x):
    D, _ = _part_distances(x)
    m = D.min(axis=1, keepdims=True)
    return m[:, 0] - BLEND * np.log(np.sum(np.exp(-(D - m) / BLEND), axis=1))


def _implicit_gradient(x, h=1e-5):
    g = np.empty_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (_implicit(x + e) - _implicit(x - e)) / (2 * h)
    return g


def _cleanup(v, f, spacing):
    from scipy.sparse import coo_matrix

    # weld coincident vertices, drop collapsed faces
    key = np.round(v / (1e-6 * spacing)).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    v = v[first]
    f = inv.ravel()[f]
    f = f[(f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])]
    used = np.unique(f)
    remap = np.full(len(v), -1)
    remap[used] = np.arange(len(used))
    v, f = v[used], remap[f]
    # tangential relaxation with projection back onto the implicit surface
    n = len(v)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    A = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    A = ((A + A.T) > 0).astype(float)
    deg = np.asarray(A.sum(axis=1)).ravel()
    for _ in range(8):
        g = _implicit_gradient(v)
        nrm = g / np.linalg.norm(g, axis=1, keepdims=True)
        d = A @ v / deg[:, None] - v
        d -= np.einsum("ij,ij->i", d, nrm)[:, None] * nrm
        v = v + 0.5 * d
        for _ in range(3):
            g = _implicit_gradient(v)
            v = v - (_implicit(v) / np.einsum("ij,ij->i", g, g))[:, None] * g
    return v, f


class BodyModel:
    """Base mesh and the per-vertex maps used to generate family members."""

    def __init__(self, resolution: float = DEFAULT_RESOLUTION):
        from skimage.measure import marching_cubes

        self.resolution = float(resolution)
        lo = np.array([-0.68, -0.26, -0.04])
        hi = np.array([0.68, 0.20, 1.92])
        shape = np.ceil((hi - lo) / resolution).astype(int) + 1
        axes = [lo[k] + resolution * np.arange(shape[k]) for k in range(3)]
        G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        field = _implicit(G).reshape(shape)
        verts, faces, _, _ = marching_cubes(field, 0.0, spacing=(resolution,) * 3)
        verts = verts + lo
        verts, faces = _cleanup(verts, faces.astype(np.int64), resolution)
        mesh = TriangleMesh(verts, faces)
        if np.sum(mesh.face_normals(normalize=False) * mesh.vertices[mesh.faces].mean(axis=1)) < 0:
            faces = faces[:, ::-1].copy()
            mesh = TriangleMesh(verts, faces)
        comp = mesh.components
        if comp.max() > 0:
            raise SynthError("base body mesh is not connected; use a finer resolution")
        self.mesh = mesh
        D, T = _part_distances(mesh.vertices)
        w = np.exp(-(D - D.min(axis=1, keepdims=True)) / BLEND)
        self.part_weights = w / w.sum(axis=1, keepdims=True)
        starts = np.array([p[1] for p in _PARTS])
        ends = np.array([p[2] for p in _PARTS])
        self.axis_points = starts[None] + T[:, :, None] * (ends - starts)[None]  # (m, parts, 3)
        self.skeleton = Skeleton(BONE_NAMES, BONE_PARENTS, [_BONES[b][0] for b in BONE_NAMES],
                                 [_BONES[b][1] for b in BONE_NAMES])
        self.weights = fallback_rigging_weights(mesh, self.skeleton)
        tree = cKDTree(mesh.vertices)
        self.landmarks = np.array([tree.query(_SITES[n])[1] for n in DEFAULT_LANDMARKS])
        if len(set(self.landmarks.tolist())) != len(self.landmarks):
            raise SynthError("landmark sites collapsed onto the same vertex")

    def girth_factors(self, params: SynthBodyParams) -> np.ndarray:
        group = {"torso": params.torso_girth, "limb": params.limb_girth, None: 1.0}
        return np.array([group[p[5]] for p in _PARTS])

    def vertices(self, params: SynthBodyParams) -> np.ndarray:
        g = self.girth_factors(params)
        v = self.mesh.vertices
        radial = v[:, None, :] - self.axis_points
        out = v + np.einsum("mp,mpc->mc", self.part_weights * (g - 1.0)[None], radial)
        return out * params.height_scale

    def check_clearance(self, params: SynthBodyParams):
        g = self.girth_factors(params)
        index = {p[0]: i for i, p in enumerate(_PARTS)}
        for a, b, gap in _CLEARANCE:
            i, j = index[a], index[b]
            pa = np.linspace(_PARTS[i][1], _PARTS[i][2], 25)
            pb = np.linspace(_PARTS[j][1], _PARTS[j][2], 25)
            ra = g[i] * np.linspace(_PARTS[i][3], _PARTS[i][4], 25)
            rb = g[j] * np.linspace(_PARTS[j][3], _PARTS[j][4], 25)
            d = np.linalg.norm(pa[:, None] - pb[None], axis=2) - ra[:, None] - rb[None]
            if d.min() < gap:
                raise SynthError(f"parts {a} and {b} intersect for {params}")


_MODELS: dict = {}


def body_model(resolution: float = DEFAULT_RESOLUTION) -> BodyModel:
    """Cached :class:`BodyModel` per resolution (the base mesh is deterministic)."""
    key = round(float(resolution), 9)
    if key not in _MODELS:
        _MODELS[key] = BodyModel(resolution)
    return _MODELS[key]


def generate_body(params: SynthBodyParams, resolution: float = DEFAULT_RESOLUTION) -> RiggedTemplate:
    """Body mesh, landmark vertices, embedded skeleton and rigging weights."""
    params.validate()
    model = body_model(resolution)
    model.check_clearance(params)
    mesh = model.mesh.with_vertices(model.vertices(params))
    s = params.height_scale
    skel = Skeleton(BONE_NAMES, BONE_PARENTS, model.skeleton.heads * s, model.skeleton.tails * s)
    return RiggedTemplate(mesh, skel, model.weights.copy(), model.landmarks.copy())


def _bone(name):
    return BONE_NAMES.index(name)


def squat_posture(depth: float, skeleton: Skeleton, arms_forward: float = 0.0) -> PostureParams:
    """Squat at ``depth`` in [0, 1] with the feet kept where they stand."""
    hip, knee, lean = 1.25 * depth, 1.9 * depth, 0.45 * depth
    rot = np.zeros((N_BONES, 3))
    rot[_bone("spine"), 0] = lean
    for side in ("l", "r"):
        rot[_bone(f"{side}_thigh"), 0] = -hip
        rot[_bone(f"{side}_shin"), 0] = knee
        rot[_bone(f"{side}_foot"), 0] = -(knee - hip)
        rot[_bone(f"{side}_upper_arm"), 0] = -(0.9 * depth + arms_forward) - lean
    p = PostureParams(rot, 1.0, np.zeros(3))
    B = global_transforms(skeleton, p)
    feet = [_bone("l_foot"), _bone("r_foot")]
    rest = np.concatenate([skeleton.heads[feet], skeleton.tails[feet]]).mean(axis=0)
    posed = np.mean([B[k, :3, :3] @ x + B[k, :3, 3] for k in feet for x in (skeleton.heads[k], skeleton.tails[k])],
                    axis=0)
    p.translation = rest - posed
    return p


def squat_curve(n_frames: int = 31, skeleton: Skeleton | None = None) -> list:
    """Standing -> squatting -> standing; frame i and frame n + 1 - i match exactly."""
    skeleton = skeleton or body_model().skeleton
    u = np.arange(n_frames) / max(n_frames - 1, 1)
    depth = np.sin(np.pi * np.minimum(u, u[::-1]))
    return [squat_posture(d, skeleton) for d in depth]


@dataclass
class SequenceFrame:
    mesh: TriangleMesh
    landmarks: np.ndarray
    posture: PostureParams


def generate_sequence(params: SynthBodyParams, curve, resolution: float = DEFAULT_RESOLUTION) -> list:
    """Skinned meshes for each posture of ``curve``, with ground truth."""
    body = generate_body(params, resolution)
    out = []
    for p in curve:
        m = posed_mesh(body, p)
        out.append(SequenceFrame(m, body.landmarks.copy(), p))
    return out


@dataclass(frozen=True)
class NoiseSpec:
    """Scan corruption: ``gaussian`` (sigma as a fraction of the bounding-ball
    radius), ``outliers`` (probability and range in multiples of the average
    edge length) or ``holes`` (count and geodesic radius in metres)."""

    kind: str
    sigma_fraction: float = 0.05
    probability: float = 1.0 / 50.0
    outlier_range: float = 4.0
    hole_count: int = 5
    hole_radius: float = 0.05

    def __post_init__(self):
        if self.kind not in ("gaussian", "outliers", "holes"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma_fraction < 0 or self.outlier_range < 0:
            raise ValueError("noise magnitudes must be non-negative")
        if not 0 < self.probability <= 1:
            raise ValueError("outlier probability must lie in (0, 1]")
        if self.hole_count < 1 or self.hole_radius <= 0:
            raise ValueError("hole count and radius must be positive")


def corrupt(mesh: TriangleMesh, spec: NoiseSpec, seed: int = 0) -> TriangleMesh:
    rng = np.random.default_rng(seed)
    v = mesh.vertices
    if spec.kind == "gaussian":
        sigma = spec.sigma_fraction * bounding_ball_radius(mesh)
        return mesh.with_vertices(v + rng.normal(scale=sigma, size=v.shape)) if sigma > 0 else mesh
    if spec.kind == "outliers":
        hit = rng.random(len(v)) < spec.probability
        amount = rng.uniform(0.0, spec.outlier_range * average_edge_length(mesh), size=len(v))
        out = v + (hit * amount)[:, None] * vertex_normals(mesh)
        return mesh.with_vertices(out)
    seeds = rng.choice(len(v), size=spec.hole_count, replace=False)
    removed = np.zeros(len(v), dtype=bool)
    for s in seeds:
        removed |= fast_marching_geodesics(mesh, int(s), spec.hole_radius * 1.5) <= spec.hole_radius
    keep_face = ~np.any(removed[mesh.faces], axis=1)
    if mesh.face_areas()[keep_face].sum() < 0.5 * mesh.area():
        raise SynthError("hole specification removes more than half of the surface")
    faces = mesh.faces[keep_face]
    valid = np.zeros(len(v), dtype=bool)
    valid[faces.ravel()] = True
    valid &= mesh.valid
    return TriangleMesh(v, faces, valid)


def simulate_clothing(mesh: TriangleMesh, offset: float, fold_amplitude: float = 0.0, seed: int = 0) -> TriangleMesh:
    """Push every vertex out along its normal by ``offset`` plus smooth folds in [0, amplitude]."""
    if offset < 0 or fold_amplitude < 0:
        raise ValueError("offset and fold amplitude must be non-negative")
    if offset == 0 and fold_amplitude == 0:
        return mesh
    rng = np.random.default_rng(seed)
    v = mesh.vertices
    folds = np.zeros(len(v))
    for _ in range(6):
        k = rng.normal(size=3) * 12.0
        folds += np.cos(v @ k + rng.uniform(0, 2 * np.pi))
    folds = (folds - folds.min()) / max(np.ptp(folds), 1e-12)
    return mesh.with_vertices(v + (offset + fold_amplitude * folds)[:, None] * vertex_normals(mesh))


@dataclass
class TrainingSet:
    meshes: list
    landmarks: np.ndarray       # (scans, 14)
    standard: np.ndarray        # scan is in the standard posture
    params: list                # SynthBodyParams per scan
    skeleton: Skeleton          # rig for the mean standard-posture body
    weights: np.ndarray


def training_postures(skeleton: Skeleton) -> list:
    """Standard posture first, then a few others."""
    return [PostureParams.identity(), squat_posture(0.5, skeleton), squat_posture(1.0, skeleton),
            squat_posture(0.0, skeleton, arms_forward=0.8)]


def training_set(n_subjects: int = 8, seed: int = 0, resolution: float = DEFAULT_RESOLUTION,
                 postures_per_subject: int | None = None) -> TrainingSet:
    """Random family members, each in the standard posture and a few others."""
    rng = np.random.default_rng(seed)
    meshes, lms, standard, params, heads, tails = [], [], [], [], [], []
    body = None
    for s in range(n_subjects):
        p = SynthBodyParams.random(rng, seed=s)
        body = generate_body(p, resolution)
        curve = training_postures(body.skeleton)[:postures_per_subject]
        for k, posture in enumerate(curve):
            meshes.append(posed_mesh(body, posture))
            lms.append(body.landmarks)
            standard.append(k == 0)
            params.append(p)
        heads.append(body.skeleton.heads)
        tails.append(body.skeleton.tails)
    skel = Skeleton(BONE_NAMES, BONE_PARENTS, np.mean(heads, axis=0), np.mean(tails, axis=0))
    return TrainingSet(meshes, np.array(lms), np.array(standard), params, skel, body.weights.copy())
