import numpy as np
import pytest

from bodyfit.mesh import TriangleMesh, bounding_ball_radius, vertex_normals
from bodyfit.nonrigid import clothing_penalty
from bodyfit.primitives import icosphere
from bodyfit.skeleton import PostureParams, posed_mesh
from bodyfit.synth import (NoiseSpec, SynthBodyParams, SynthError, corrupt, generate_body, generate_sequence,
                           simulate_clothing, squat_curve, training_set)

RES = 0.04


def test_generation_is_deterministic():
    p = SynthBodyParams(1.02, 1.1, 0.95)
    a, b = generate_body(p, RES), generate_body(p, RES)
    assert np.array_equal(a.mesh.vertices, b.mesh.vertices) and np.array_equal(a.mesh.faces, b.mesh.faces)
    assert np.array_equal(a.landmarks, b.landmarks) and np.array_equal(a.weights, b.weights)


def test_height_scale():
    lo = generate_body(SynthBodyParams(1.0), RES).mesh.vertices[:, 2]
    hi = generate_body(SynthBodyParams(1.1), RES).mesh.vertices[:, 2]
    assert np.ptp(hi) / np.ptp(lo) == pytest.approx(1.1, rel=0.01)


def test_bodies_share_connectivity():
    rng = np.random.default_rng(0)
    ref = generate_body(SynthBodyParams(), RES).mesh.faces
    for _ in range(3):
        assert np.array_equal(generate_body(SynthBodyParams.random(rng), RES).mesh.faces, ref)


@pytest.mark.parametrize("kw", [dict(height_scale=0.5), dict(torso_girth=2.0), dict(limb_girth=0.1)])
def test_out_of_range_rejected(kw):
    with pytest.raises(SynthError):
        generate_body(SynthBodyParams(**kw), RES)


def test_identity_curve_constant():
    frames = generate_sequence(SynthBodyParams(), [PostureParams.identity()] * 3, RES)
    assert all(np.array_equal(f.mesh.vertices, frames[0].mesh.vertices) for f in frames)


def test_squat_frames_mirror():
    body = generate_body(SynthBodyParams(), RES)
    frames = generate_sequence(SynthBodyParams(), squat_curve(31, body.skeleton), RES)
    assert len(frames) == 31
    # frames are numbered from one
    assert np.abs(frames[7].mesh.vertices - frames[23].mesh.vertices).max() < 1e-9
    for i in range(1, 16):
        assert np.abs(frames[i - 1].mesh.vertices - frames[31 - i].mesh.vertices).max() < 1e-9


def test_frame_displacement_bounded_by_parameter_step():
    body = generate_body(SynthBodyParams(), RES)
    sk = body.skeleton
    rng = np.random.default_rng(1)
    diam = 2 * bounding_ball_radius(body.mesh)
    chain = 1 + max(_chain_length(sk.parents, k) for k in range(17))
    # rotation vectors move points by at most |delta| times the lever arm per bone in the chain;
    # translation and scale contribute one more term each
    const = (chain + 2) * np.sqrt(3) * diam
    p = PostureParams(rng.normal(scale=0.3, size=(17, 3)))
    base = posed_mesh(body, p).vertices
    for delta in (1e-4, 1e-3, 1e-2):
        step = rng.uniform(-delta, delta, size=55)
        q = PostureParams.unpack(p.pack() + step)
        moved = np.linalg.norm(posed_mesh(body, q).vertices - base, axis=1).max()
        assert moved <= const * np.abs(step).max()


def _chain_length(parents, k):
    n = 0
    while parents[k] >= 0:
        k = parents[k]
        n += 1
    return n


def test_zero_corruption_is_identity():
    m = icosphere(2)
    assert np.array_equal(corrupt(m, NoiseSpec("gaussian", sigma_fraction=0.0)).vertices, m.vertices)
    assert np.array_equal(corrupt(m, NoiseSpec("outliers", probability=1.0, outlier_range=0.0)).vertices, m.vertices)


def test_outlier_count_binomial():
    m = icosphere(5)
    assert m.n_vertices > 10_000
    out = corrupt(m, NoiseSpec("outliers"), seed=3)
    moved = np.count_nonzero(np.any(out.vertices != m.vertices, axis=1))
    assert 120 <= moved <= 280


def test_gaussian_magnitude():
    m = icosphere(4)
    out = corrupt(m, NoiseSpec("gaussian", sigma_fraction=0.01), seed=1)
    sd = np.std(out.vertices - m.vertices)
    assert sd == pytest.approx(0.01 * bounding_ball_radius(m), rel=0.05)


@pytest.mark.parametrize("kind", ["gaussian", "outliers", "holes"])
def test_corruption_deterministic(kind):
    m = icosphere(3)
    spec = NoiseSpec(kind, hole_radius=0.2)
    a, b = corrupt(m, spec, seed=5), corrupt(m, spec, seed=5)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)
    assert np.array_equal(a.valid, b.valid)


def test_holes_mark_vertices_invalid():
    m = icosphere(3)
    out = corrupt(m, NoiseSpec("holes", hole_count=3, hole_radius=0.3), seed=2)
    assert 0 < np.count_nonzero(~out.valid) < m.n_vertices / 2
    assert np.all(out.valid[out.faces])


def test_oversized_holes_rejected():
    with pytest.raises(SynthError):
        corrupt(icosphere(3), NoiseSpec("holes", hole_count=5, hole_radius=2.0), seed=0)


def test_bad_noise_spec():
    with pytest.raises(ValueError):
        NoiseSpec("speckle")
    with pytest.raises(ValueError):
        NoiseSpec("outliers", probability=0.0)


def test_clothing_identity_and_errors():
    m = icosphere(2)
    assert simulate_clothing(m, 0.0, 0.0) is m
    with pytest.raises(ValueError):
        simulate_clothing(m, -0.01)


def test_clothing_contains_body():
    body = generate_body(SynthBodyParams(), RES).mesh
    clothed = simulate_clothing(body, 0.02, 0.01, seed=4)
    offsets = np.sum((clothed.vertices - body.vertices) * vertex_normals(body), axis=1)
    assert np.all(offsets > 0) and offsets.min() == pytest.approx(0.02, abs=1e-12)
    from scipy.spatial import cKDTree
    _, nn = cKDTree(clothed.vertices).query(body.vertices)
    rho = clothing_penalty(body.vertices, clothed.vertices[nn], vertex_normals(clothed)[nn])
    assert np.all(rho == 0)


def test_training_set_layout():
    ts = training_set(2, seed=0, resolution=RES, postures_per_subject=2)
    assert len(ts.meshes) == 4 and list(ts.standard) == [True, False, True, False]
    assert ts.landmarks.shape == (4, 14)
    assert all(isinstance(m, TriangleMesh) for m in ts.meshes)
