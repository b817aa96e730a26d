"""Non-rigid template-to-scan fitting with per-vertex rotation + translation.

Each template vertex ``v_j`` carries a translation ``t_j``, a rotation axis
``r_j`` and an angle ``a_j``.  The vertex transform is
``A_j = A(v_j) A(r_j, a_j) A(t_j) A(-v_j)``, so ``A_j v_j = v_j + R(r_j, a_j) t_j``.
The fitted energy combines a nearest-neighbour data term, a one-sided
clothing penalty that discourages leaving the scan volume, and a
distance-weighted smoothness term on the deformation parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import TriangleMesh, average_edge_length, vertex_normals
from .optimize import MinimizeOptions, minimize
from ._shape_kernel import shape_energy_kernel
from .rotations import AXIS_FLOOR, axis_angle_matrix, rotate_rows, rotate_rows_vjp

logger = logging.getLogger(__name__)

OMEGA_DATA = 1.0
OMEGA_CLOTHING = 1.0
OMEGA_SMOOTH_START = 5.0
SMOOTH_DECAY = 0.5
STOP_REL_CHANGE = 1e-3
STOP_MIN_SMOOTH = 0.1
RELAX_REL_CHANGE = 1e-2


def translation_matrix(t):
    M = np.eye(4)
    M[:3, 3] = t
    return M


def rotation_matrix4(axis, angle):
    M = np.eye(4)
    M[:3, :3] = axis_angle_matrix(axis, angle)
    return M


@dataclass
class DeformField:
    """Per-vertex deformation parameters and the smoothness neighbourhoods.

    ``params`` is (m, 7): translation (3), rotation axis (3), angle (1).
    ``pairs`` lists unordered vertex pairs closer than ``radius`` in the rest
    template, ``pair_weights`` their ``1 - |v_j - v_k|^2 / d^2`` factors.
    """

    params: np.ndarray
    pairs: np.ndarray
    pair_weights: np.ndarray
    radius: float

    @classmethod
    def initial(cls, template: TriangleMesh, radius: float | None = None) -> "DeformField":
        d = 2.0 * average_edge_length(template) if radius is None else radius
        pairs = cKDTree(template.vertices).query_pairs(d, output_type="ndarray")
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        diff = template.vertices[pairs[:, 0]] - template.vertices[pairs[:, 1]]
        w = 1.0 - np.einsum("ij,ij->i", diff, diff) / d**2
        p = np.zeros((template.n_vertices, 7))
        p[:, 3:6] = 1.0 / np.sqrt(3.0)
        return cls(p, pairs, w, d)

    def with_params(self, params) -> "DeformField":
        out = DeformField(np.asarray(params, dtype=float).reshape(-1, 7), self.pairs, self.pair_weights, self.radius)
        out._diff = getattr(self, "_diff", None)
        return out

    @property
    def translations(self):
        return self.params[:, :3]

    @property
    def axes(self):
        return self.params[:, 3:6]

    @property
    def angles(self):
        return self.params[:, 6]

    @property
    def difference_operator(self) -> sp.csr_matrix:
        """Sparse (pairs, m) matrix with rows ``e_j - e_k``."""
        if getattr(self, "_diff", None) is None:
            n = len(self.pairs)
            rows = np.repeat(np.arange(n), 2)
            vals = np.tile([1.0, -1.0], n)
            self._diff = sp.csr_matrix((vals, (rows, self.pairs.ravel())), shape=(n, len(self.params)))
        return self._diff

    def neighborhood(self, j: int) -> np.ndarray:
        a = self.pairs[self.pairs[:, 0] == j, 1]
        b = self.pairs[self.pairs[:, 1] == j, 0]
        return np.sort(np.concatenate([a, b]))


def apply_field(template: TriangleMesh, field: DeformField) -> np.ndarray:
    """Deformed vertices ``A_j v_j``."""
    p = field.params
    moved = rotate_rows(p[:, 3:6], p[:, 6], p[:, :3])
    return template.vertices + moved


def vertex_transform_matrix(v, t, axis, angle) -> np.ndarray:
    """The 4x4 ``A(v) A(r, a) A(t) A(-v)`` for one vertex."""
    return translation_matrix(v) @ rotation_matrix4(axis, angle) @ translation_matrix(t) @ translation_matrix(-np.asarray(v))


def clothing_penalty(v_deformed, nn, nn_normal):
    """``max(0, n . (v - nn))``: how far a vertex sits outside the scan surface."""
    v = np.asarray(v_deformed, dtype=float)
    s = np.sum(np.asarray(nn_normal) * (v - np.asarray(nn)), axis=-1)
    return np.maximum(s, 0.0)


@dataclass
class Correspondences:
    targets: np.ndarray   # (m, 3) nearest frame points
    normals: np.ndarray   # (m, 3) frame normals at those points
    mask: np.ndarray      # (m,) terms kept (normal angle <= 90 degrees)


@dataclass(frozen=True)
class ShapeSchedule:
    """Weights and stopping constants of the smoothness-relaxation schedule."""

    omega_data: float = OMEGA_DATA
    omega_clothing: float = OMEGA_CLOTHING
    omega_smooth: float = OMEGA_SMOOTH_START
    smooth_decay: float = SMOOTH_DECAY
    stop_rel_change: float = STOP_REL_CHANGE
    stop_min_smooth: float = STOP_MIN_SMOOTH
    relax_rel_change: float = RELAX_REL_CHANGE
    max_rounds: int = 5


@dataclass
class ScheduleState:
    omega_data: float = OMEGA_DATA
    omega_clothing: float = OMEGA_CLOTHING
    omega_smooth: float = OMEGA_SMOOTH_START
    iteration: int = 0
    energies: list = field(default_factory=list)


class FrameTarget:
    """Scan points, normals and a k-d tree (valid vertices only)."""

    def __init__(self, frame: TriangleMesh):
        if isinstance(frame, TriangleMesh):
            compact, _ = frame.compacted()
            self.points = compact.vertices
            self.normals = vertex_normals(compact)
        else:
            raise TypeError("frame must be a TriangleMesh")
        if len(self.points) == 0:
            raise ValueError("empty frame")
        self.tree = cKDTree(self.points)

    def correspondences(self, template: TriangleMesh, deformed) -> Correspondences:
        _, nn = self.tree.query(deformed)
        tn = vertex_normals(template.with_vertices(deformed))
        qn = self.normals[nn]
        mask = np.einsum("ij,ij->i", tn, qn) >= 0.0
        return Correspondences(self.points[nn], qn, mask)


class ShapeEnergy:
    """Fitting energy over the flattened (m, 7) field parameters."""

    def __init__(self, template: TriangleMesh, field: DeformField, corr: Correspondences, state: ScheduleState):
        self.v = template.vertices
        self.pairs = field.pairs
        self.pw = field.pair_weights
        self.D = field.difference_operator
        self.DT = self.D.T.tocsr()
        self.corr = corr
        self.state = state
        if not np.any(corr.mask):
            logger.warning("no compatible correspondences; fitting smoothness only")

    def terms(self, x):
        p = x.reshape(-1, 7)
        moved = rotate_rows(p[:, 3:6], p[:, 6], p[:, :3])
        xd = self.v + moved
        m = self.corr.mask
        diff = (xd - self.corr.targets)[m]
        data = float(np.sum(diff * diff))
        rho = clothing_penalty(xd[m], self.corr.targets[m], self.corr.normals[m])
        cloth = float(rho.sum())
        nr = np.maximum(np.linalg.norm(p[:, 3:6], axis=1), AXIS_FLOOR)
        rh = p[:, 3:6] / nr[:, None]
        dt = self.D @ p[:, :3]
        dr = self.D @ rh
        da = self.D @ p[:, 6]
        per_pair = np.sum(dt * dt, axis=1) + np.sum(dr * dr, axis=1) + da * da
        # each unordered pair appears in both D_j and D_k
        smooth = float(2.0 * np.sum(self.pw * per_pair))
        return data, cloth, smooth, dict(p=p, xd=xd, rho=rho,
                                         diff=diff, rh=rh, nr=nr, dt=dt, dr=dr, da=da)

    def __call__(self, x):
        s = self.state
        data, cloth, smooth, g = shape_energy_kernel(
            self.v, np.ascontiguousarray(x.reshape(-1, 7)), self.corr.targets, self.corr.normals,
            self.corr.mask, self.pairs, self.pw, float(s.omega_data), float(s.omega_clothing),
            float(s.omega_smooth), AXIS_FLOOR)
        energy = s.omega_data * data + s.omega_clothing * cloth + s.omega_smooth * smooth
        return energy, g.ravel()

    def reference(self, x):
        """Vectorized numpy evaluation of ``__call__``, kept as an independent check."""
        s = self.state
        data, cloth, smooth, c = self.terms(x)
        energy = s.omega_data * data + s.omega_clothing * cloth + s.omega_smooth * smooth
        p = c["p"]
        m = self.corr.mask
        gx = np.zeros_like(c["xd"])
        gx[m] = 2.0 * s.omega_data * c["diff"] + s.omega_clothing * (c["rho"] > 0)[:, None] * self.corr.normals[m]
        g = np.zeros_like(p)
        # d x / d t = R  ->  R^T gx is a rotation by -angle
        g[:, :3] = rotate_rows(p[:, 3:6], -p[:, 6], gx)
        g[:, 3:6], g[:, 6] = rotate_rows_vjp(p[:, 3:6], p[:, 6], p[:, :3], gx)

        coef = 4.0 * s.omega_smooth * self.pw
        g[:, :3] += self.DT @ (coef[:, None] * c["dt"])
        G_rh = self.DT @ (coef[:, None] * c["dr"])
        rh = c["rh"]
        g[:, 3:6] += (G_rh - rh * np.einsum("ij,ij->i", rh, G_rh)[:, None]) / c["nr"][:, None]
        g[:, 6] += self.DT @ (coef * c["da"])
        return energy, g.ravel()


@dataclass
class ShapeFitResult:
    field: DeformField
    mesh: TriangleMesh
    trace: list
    stop_reason: str


def _rel_change(prev, cur):
    if prev <= 0:
        return 0.0 if cur <= 0 else np.inf
    return abs(prev - cur) / prev


def fit_shape(template_posed: TriangleMesh, frame: TriangleMesh, init_field: DeformField | None = None,
              schedule: ShapeSchedule | None = None, options: MinimizeOptions | None = None,
              target: FrameTarget | None = None) -> ShapeFitResult:
    """Fit the posed template to a scan with the smoothness-relaxation schedule.

    Within a schedule step correspondences are recomputed until the energy
    changes by less than ``relax_rel_change`` between rounds (or
    ``max_rounds`` is reached); then the smoothness weight is multiplied by
    ``smooth_decay``.  Fitting stops when the step energy changes by less
    than ``stop_rel_change`` or the smoothness weight would drop below
    ``stop_min_smooth``.
    """
    sch = schedule or ShapeSchedule()
    field = init_field or DeformField.initial(template_posed)
    target = target or FrameTarget(frame)
    opts = options or MinimizeOptions(max_iterations=200)
    state = ScheduleState(sch.omega_data, sch.omega_clothing, sch.omega_smooth)
    trace = []
    x = field.params.ravel().copy()
    prev_step_energy = None
    while True:
        round_energy = None
        rounds = 0
        for rounds in range(1, sch.max_rounds + 1):
            deformed = apply_field(template_posed, field.with_params(x))
            corr = target.correspondences(template_posed, deformed)
            res = minimize(ShapeEnergy(template_posed, field, corr, state), x, opts)
            x = res.x
            state.energies.append(res.value)
            done = round_energy is not None and _rel_change(round_energy, res.value) < sch.relax_rel_change
            round_energy = res.value
            if done:
                break
        trace.append(dict(step=state.iteration, omega_data=state.omega_data, omega_clothing=state.omega_clothing,
                          omega_smooth=state.omega_smooth, energy=round_energy, rounds=rounds))
        logger.debug("fit_shape step %d: w_smooth=%.4g E=%.6g (%d rounds)", state.iteration,
                     state.omega_smooth, round_energy, rounds)
        if prev_step_energy is not None and _rel_change(prev_step_energy, round_energy) < sch.stop_rel_change:
            stop_reason = "energy"
            break
        nxt = sch.smooth_decay * state.omega_smooth
        if nxt < sch.stop_min_smooth:
            stop_reason = "smoothness-weight"
            break
        state.omega_smooth = nxt
        state.iteration += 1
        prev_step_energy = round_energy
    field = field.with_params(x)
    return ShapeFitResult(field, template_posed.with_vertices(apply_field(template_posed, field)), trace, stop_reason)
