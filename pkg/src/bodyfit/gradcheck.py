"""Finite-difference checks of every analytic energy gradient."""

from __future__ import annotations

import numpy as np

from .nonrigid import DeformField, FrameTarget, ScheduleState, ShapeEnergy, apply_field
from .optimize import check_gradient
from .shape_space import HumanEnergy, shape_feature
from .skeleton import PostureParams, SkinningEnergy, posed_mesh
from .synth import SynthBodyParams, generate_body, squat_posture

SUITES = ("landmark_posture", "nn_posture", "shape", "human")


def _random_posture(rng) -> PostureParams:
    return PostureParams(rng.normal(scale=0.3, size=(17, 3)), float(rng.uniform(0.9, 1.1)),
                         rng.normal(scale=0.05, size=3))


def run_gradient_suites(seed: int = 0, samples: int = 50, resolution: float = 0.04, suites=SUITES) -> dict:
    """Maximum relative gradient error per energy over ``samples`` random coordinates."""
    rng = np.random.default_rng(seed)
    body = generate_body(SynthBodyParams(), resolution)
    other = generate_body(SynthBodyParams(1.05, 1.1, 0.9), resolution)
    frame = posed_mesh(other, squat_posture(0.6, other.skeleton))
    out = {}
    if "landmark_posture" in suites:
        li = body.landmarks
        E = SkinningEnergy(body.skeleton, body.mesh.vertices[li], body.weights[li], frame.vertices[li])
        out["landmark_posture"] = check_gradient(E, _random_posture(rng).pack(), 1e-6, samples, rng)
    if "nn_posture" in suites:
        from scipy.spatial import cKDTree

        posed = posed_mesh(body, squat_posture(0.5, body.skeleton))
        _, nn = cKDTree(frame.vertices).query(posed.vertices)
        E = SkinningEnergy(body.skeleton, body.mesh.vertices, body.weights, frame.vertices[nn])
        out["nn_posture"] = check_gradient(E, _random_posture(rng).pack(), 1e-6, samples, rng)
    if "shape" in suites:
        tpl = posed_mesh(body, squat_posture(0.6, body.skeleton))
        field = DeformField.initial(tpl)
        p = field.params.copy()
        m = len(p)
        p[:, :3] = rng.normal(scale=0.005, size=(m, 3))
        p[:, 3:6] += rng.normal(scale=0.2, size=(m, 3))
        p[:, 6] = rng.normal(scale=0.2, size=m)
        corr = FrameTarget(frame).correspondences(tpl, apply_field(tpl, field.with_params(p)))
        E = ShapeEnergy(tpl, field, corr, ScheduleState(omega_smooth=1.25))
        out["shape"] = check_gradient(E, p.ravel(), 1e-5, samples, rng)
    if "human" in suites:
        target = shape_feature(other.mesh)
        E = HumanEnergy(body.mesh, target)
        x = body.mesh.vertices + rng.normal(scale=1e-3, size=body.mesh.vertices.shape)
        out["human"] = check_gradient(E, x.ravel(), 1e-6, samples, rng)
    return out
