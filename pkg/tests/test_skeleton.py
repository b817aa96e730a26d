import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bodyfit.mesh import TriangleMesh, bounding_ball_radius
from bodyfit.optimize import check_gradient
from bodyfit.primitives import icosphere
from bodyfit.skeleton import (N_BONES, N_PARAMS, PostureParams, RiggedTemplate, SkinningEnergy,
                              compute_mean_template, fallback_rigging_weights, fit_posture_landmarks,
                              fit_posture_nn, global_transforms, posed_mesh, skin, skin_points)
from bodyfit.synth import NoiseSpec, corrupt, squat_curve, squat_posture

from conftest import random_rigid
from oracles import scene_graph_transforms


def _random_params(rng, scale=0.3):
    return PostureParams(rng.normal(scale=scale, size=(N_BONES, 3)), rng.uniform(0.8, 1.2), rng.normal(size=3))


def _near(params, rng, amount=0.02):
    return PostureParams(params.rotvecs + rng.normal(scale=amount, size=(N_BONES, 3)), params.scale,
                         params.translation + rng.normal(scale=amount * 0.1, size=3))


# ---- parameters and template ----------------------------------------------------------------

def test_pack_round_trip():
    p = _random_params(np.random.default_rng(0))
    q = PostureParams.unpack(p.pack())
    assert len(p.pack()) == N_PARAMS == 55
    assert np.array_equal(q.rotvecs, p.rotvecs) and q.scale == p.scale and np.array_equal(q.translation, p.translation)


def test_mean_template_cases():
    m = icosphere(2)
    rng = np.random.default_rng(1)
    assert np.array_equal(compute_mean_template([m]).vertices, m.vertices)
    t = rng.normal(size=3)
    assert np.allclose(compute_mean_template([m, m.transformed(np.eye(3), t)]).vertices, m.vertices + t / 2, atol=1e-12)
    many = [m.with_vertices(m.vertices + rng.normal(size=m.vertices.shape)) for _ in range(5)]
    direct = sum(x.vertices for x in many) / 5
    assert np.abs(compute_mean_template(many).vertices - direct).max() < 1e-12


def test_mean_template_errors():
    with pytest.raises(ValueError):
        compute_mean_template([])
    with pytest.raises(ValueError):
        compute_mean_template([icosphere(1), icosphere(2)])


def test_rigged_template_validation(small_body):
    bad = small_body.weights.copy()
    bad[0] *= 2
    with pytest.raises(ValueError):
        RiggedTemplate(small_body.mesh, small_body.skeleton, bad, small_body.landmarks)


# ---- transforms and skinning ----------------------------------------------------------------

def test_identity_transforms(small_body):
    assert np.allclose(global_transforms(small_body.skeleton, PostureParams.identity()), np.eye(4), atol=0)


def test_root_translation_propagates(small_body):
    t = np.array([0.3, -1.0, 2.0])
    B = global_transforms(small_body.skeleton, PostureParams(translation=t))
    expect = np.eye(4)
    expect[:3, 3] = t
    assert np.abs(B - expect).max() < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_transforms_match_scene_graph(small_body, seed):
    sk = small_body.skeleton
    p = _random_params(np.random.default_rng(seed))
    oracle = scene_graph_transforms(sk.parents, sk.heads, p.rotvecs, p.scale, p.translation)
    assert np.abs(global_transforms(sk, p) - oracle).max() < 1e-12


def test_nonpositive_scale_rejected(small_body):
    with pytest.raises(ValueError):
        global_transforms(small_body.skeleton, PostureParams(scale=0.0))


def test_skin_identity(small_body):
    B = np.repeat(np.eye(4)[None], N_BONES, axis=0)
    assert np.abs(skin(small_body, B) - small_body.mesh.vertices).max() < 1e-14


def test_skin_partition_of_unity(small_body):
    R, t = random_rigid(np.random.default_rng(2))
    M = np.eye(4)
    M[:3, :3], M[:3, 3] = R, t
    out = skin(small_body, np.repeat(M[None], N_BONES, axis=0))
    assert np.abs(out - (small_body.mesh.vertices @ R.T + t)).max() < 1e-9


def test_single_bone_weights_are_rigid():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, 3))
    bone = rng.integers(0, N_BONES, size=20)
    W = np.zeros((20, N_BONES))
    W[np.arange(20), bone] = 1.0
    B = np.empty((N_BONES, 4, 4))
    for k in range(N_BONES):
        R, t = random_rigid(rng)
        B[k] = np.eye(4)
        B[k, :3, :3], B[k, :3, 3] = R, t
    expect = np.einsum("jab,jb->ja", B[bone, :3, :3], x) + B[bone, :3, 3]
    assert np.abs(skin_points(x, W, B) - expect).max() < 1e-12


# ---- landmark posture -----------------------------------------------------------------------

def test_landmark_fit_fixed_point(small_body):
    p = squat_posture(0.4, small_body.skeleton)
    y = posed_mesh(small_body, p).vertices[small_body.landmarks]
    E = SkinningEnergy(small_body.skeleton, small_body.mesh.vertices[small_body.landmarks],
                       small_body.weights[small_body.landmarks], y)
    assert E(p.pack())[0] < 1e-24
    q, e = fit_posture_landmarks(small_body, y, init=p)
    assert e < 1e-20
    assert np.abs(q.pack() - p.pack()).max() < 1e-9


def test_landmark_fit_recovers_posed_landmarks(small_body):
    rng = np.random.default_rng(4)
    p = squat_posture(0.7, small_body.skeleton)
    y = posed_mesh(small_body, p).vertices[small_body.landmarks]
    q, _ = fit_posture_landmarks(small_body, y, init=_near(p, rng))
    got = posed_mesh(small_body, q).vertices[small_body.landmarks]
    assert np.linalg.norm(got - y, axis=1).max() < 1e-3 * bounding_ball_radius(small_body.mesh)


def test_landmark_energy_gradient(small_body):
    rng = np.random.default_rng(5)
    li = small_body.landmarks
    y = small_body.mesh.vertices[li] + rng.normal(scale=0.05, size=(len(li), 3))
    E = SkinningEnergy(small_body.skeleton, small_body.mesh.vertices[li], small_body.weights[li], y)
    assert check_gradient(E, _random_params(rng).pack(), step=1e-6, samples=55, rng=0) < 1e-4


def test_landmark_fit_rejects_nonfinite(small_body):
    y = np.full((len(small_body.landmarks), 3), np.nan)
    with pytest.raises(ValueError):
        fit_posture_landmarks(small_body, y)


# ---- nearest-neighbour posture ------------------------------------------------------------

def test_nn_fit_on_own_surface(small_body):
    p = squat_posture(0.3, small_body.skeleton)
    frame = posed_mesh(small_body, p)
    _, e, hist = fit_posture_nn(small_body, frame, p)
    assert hist[0] < 1e-20 and e < 1e-20


def test_nn_fit_recovers_surface(small_body):
    rng = np.random.default_rng(6)
    p = squat_posture(0.5, small_body.skeleton)
    frame = posed_mesh(small_body, p)
    q, _, hist = fit_posture_nn(small_body, frame, _near(p, rng, 0.01), outer_iters=30, rel_tol=1e-6)
    err = np.linalg.norm(posed_mesh(small_body, q).vertices - frame.vertices, axis=1)
    assert err.max() < 1e-3 * bounding_ball_radius(frame)
    assert np.all(np.diff(hist) <= 1e-12 * hist[0])


def test_nn_energy_gradient(small_body):
    rng = np.random.default_rng(7)
    y = small_body.mesh.vertices + rng.normal(scale=0.02, size=small_body.mesh.vertices.shape)
    E = SkinningEnergy(small_body.skeleton, small_body.mesh.vertices, small_body.weights, y)
    assert check_gradient(E, _random_params(rng, 0.2).pack(), step=1e-6, samples=55, rng=1) < 1e-4


def test_nn_fit_with_holes(small_body):
    rng = np.random.default_rng(8)
    p = squat_posture(0.5, small_body.skeleton)
    frame = posed_mesh(small_body, p)
    holed = corrupt(frame, NoiseSpec("holes", hole_count=6, hole_radius=0.12), seed=3)
    assert 0.1 < 1 - holed.valid.mean()
    init = _near(p, rng, 0.03)

    def surviving_error(target):
        q, _, _ = fit_posture_nn(small_body, target, init)
        d = np.linalg.norm(posed_mesh(small_body, q).vertices - frame.vertices, axis=1)
        return d[holed.valid].mean()

    clean, holes = surviving_error(frame), surviving_error(holed)
    assert holes <= 2 * max(clean, 1e-4)


def test_nn_fit_empty_frame(small_body):
    with pytest.raises(ValueError):
        fit_posture_nn(small_body, np.zeros((0, 3)), PostureParams.identity())


def test_icp_energy_non_increasing(small_body):
    rng = np.random.default_rng(9)
    p = squat_posture(0.8, small_body.skeleton)
    frame = posed_mesh(small_body, p)
    frame = frame.with_vertices(frame.vertices + rng.normal(scale=0.003, size=frame.vertices.shape))
    _, _, hist = fit_posture_nn(small_body, frame, squat_posture(0.6, small_body.skeleton), outer_iters=8)
    assert np.all(np.diff(hist) <= 1e-12 * hist[0])


def test_sequence_parameters_change_smoothly(small_body):
    sk = small_body.skeleton
    curve = squat_curve(31, sk)[:6]
    step = max(np.abs(a.pack() - b.pack()).max() for a, b in zip(curve, curve[1:]))
    prev = curve[0]
    for p in curve[1:]:
        frame = posed_mesh(small_body, p)
        y = frame.vertices[small_body.landmarks]
        lm, _ = fit_posture_landmarks(small_body, y, init=prev)
        q, _, _ = fit_posture_nn(small_body, frame, lm)
        assert np.abs(q.pack() - prev.pack()).max() <= 2 * step
        prev = q


# ---- fallback weights -------------------------------------------------------------------------

def test_fallback_weights_partition(small_body):
    W = fallback_rigging_weights(small_body.mesh, small_body.skeleton)
    assert W.shape == (small_body.mesh.n_vertices, N_BONES)
    assert np.all(W >= 0) and np.abs(W.sum(axis=1) - 1).max() < 1e-9


def test_fallback_weights_limit_cases(small_body):
    sk = small_body.skeleton
    on_bone = 0.5 * (sk.heads[3] + sk.tails[3])
    # two parallel bones either side of a point, the rest about 100 m away
    heads, tails = sk.heads.copy(), sk.tails.copy()
    far = np.array([100.0, 0.0, 0.0])
    heads[:] = far + np.arange(N_BONES)[:, None] * 10.0
    tails[:] = heads + [0, 0, 1.0]
    heads[1], tails[1] = [-1.0, 0, 0], [-1.0, 0, 1.0]
    heads[2], tails[2] = [1.0, 0, 0], [1.0, 0, 1.0]
    mid = np.array([0.0, 0.0, 0.5])
    from bodyfit.skeleton import Skeleton
    toy = Skeleton(sk.names, sk.parents, heads, tails)
    pts = TriangleMesh(np.vstack([mid, heads[5] + [0, 0, 0.5], [0, 5, 0]]), [(0, 1, 2)])
    W = fallback_rigging_weights(pts, toy, smoothing_passes=0)
    # the two far bones among the four nearest contribute about 1e-4 between them
    assert W[0, 1] == pytest.approx(0.5, abs=1e-3) and W[0, 1] == W[0, 2]
    assert W[1, 5] == 1.0
    W_real = fallback_rigging_weights(TriangleMesh(np.vstack([on_bone, on_bone + [1, 0, 0], on_bone + [0, 1, 0]]),
                                                   [(0, 1, 2)]), sk)
    assert W_real[0, 3] == 1.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_fallback_weights_sum_to_one_random(seed):
    from bodyfit.synth import generate_body, SynthBodyParams
    rng = np.random.default_rng(seed)
    m = icosphere(2)
    m = m.with_vertices(m.vertices * 0.3 + [0, 0, 1.0] + rng.normal(scale=0.05, size=m.vertices.shape))
    sk = generate_body(SynthBodyParams(), 0.04).skeleton
    W = fallback_rigging_weights(m, sk)
    assert np.abs(W.sum(axis=1) - 1).max() < 1e-9
