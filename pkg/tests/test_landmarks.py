import numpy as np
import pytest

from bodyfit.canonical import RigidTransform
from bodyfit.landmarks import (DEFAULT_LANDMARKS, REGULARIZATION_FLOOR, FrameGeometry, GaussianPotential,
                               LandmarkError, LandmarkTopology, candidate_labels, joint_log_probability,
                               max_product, max_product_infer, track_landmarks, train_landmark_model)
from bodyfit.mesh import average_edge_length
from bodyfit.skeleton import posed_mesh
from bodyfit.synth import SynthBodyParams, generate_sequence, squat_curve, training_set

from conftest import random_rigid
from oracles import brute_force_map, gaussian_logpdf, random_scores, random_tree

RES = 0.04


@pytest.fixture(scope="module")
def trained():
    ts = training_set(3, seed=1, resolution=RES, postures_per_subject=2)
    return ts, train_landmark_model(ts.meshes, ts.landmarks, anchor_count=100)


# ---- topology ------------------------------------------------------------------

def test_default_topology_is_a_tree_rooted_at_neck():
    t = LandmarkTopology.default()
    assert t.n_nodes == 14 and len(t.edges) == 13
    assert t.names[t.root] == "neck"
    assert sorted(t.order.tolist()) == list(range(14))
    for a, b in t.edges:
        assert t.parent[b] == a


def test_topology_rejects_cycles_and_forests():
    with pytest.raises(LandmarkError):
        LandmarkTopology("abc", [(0, 1), (1, 0)])
    with pytest.raises(LandmarkError):
        LandmarkTopology("abcd", [(0, 1), (1, 2), (2, 0)])


# ---- Gaussian potentials ----------------------------------------------------------

def test_logpdf_matches_direct_formula():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(20, 20))
    cov = A @ A.T + np.eye(20)
    mean = rng.normal(size=20)
    g = GaussianPotential(mean, cov)
    x = rng.normal(size=(10, 20))
    ref = [gaussian_logpdf(xi, mean, cov) for xi in x]
    assert np.abs(g.logpdf(x) - ref).max() < 1e-9


def test_constant_samples_give_floor_covariance():
    x = np.tile(np.linspace(0.5, 1.5, 20), (5, 1))
    g = GaussianPotential.fit(x)
    assert np.allclose(g.mean, x[0], rtol=0, atol=1e-15)
    assert np.allclose(g.covariance, REGULARIZATION_FLOOR * np.eye(20), rtol=0, atol=1e-24)
    assert np.linalg.eigvalsh(g.covariance).min() >= REGULARIZATION_FLOOR * (1 - 1e-9)


def test_variation_in_one_entry_stays_on_that_entry():
    x = np.tile(np.linspace(0.5, 1.5, 20), (2, 1))
    x[1, 1] += 0.3
    C = GaussianPotential.fit(x).covariance
    off = C - np.diag(np.diag(C))
    assert np.abs(off).max() < 1e-12
    assert np.argmax(np.diag(C)) == 1


def test_fitted_mean_within_three_standard_errors():
    rng = np.random.default_rng(5)
    mean = rng.uniform(0.8, 1.2, size=20)
    sd = rng.uniform(0.01, 0.05, size=20)
    n = 400
    g = GaussianPotential.fit(mean + sd * rng.normal(size=(n, 20)))
    assert np.all(np.abs(g.mean - mean) <= 3 * sd / np.sqrt(n))


def test_duplicated_scans_give_single_descriptor(trained):
    ts, _ = trained
    m = ts.meshes[0]
    model = train_landmark_model([m, m, m], [ts.landmarks[0]] * 3, anchor_count=60)
    desc = FrameGeometry(m).descriptors(ts.landmarks[0])
    for j, pot in enumerate(model.node_potentials):
        assert np.allclose(pot.mean, desc[j], rtol=0, atol=1e-14)
        assert np.allclose(pot.covariance, REGULARIZATION_FLOOR * np.eye(20), rtol=0, atol=1e-20)


def test_model_dimensions(trained):
    _, model = trained
    assert len(model.node_potentials) == 14 and all(p.dim == 20 for p in model.node_potentials)
    assert len(model.edge_potentials) == 13 and all(p.dim == 3 for p in model.edge_potentials)


# ---- candidates ----------------------------------------------------------------------

def test_candidates_contain_previous_vertex(trained):
    ts, _ = trained
    m = ts.meshes[0]
    cands = candidate_labels(m, m.vertices[ts.landmarks[0]], 50)
    for c, v in zip(cands, ts.landmarks[0]):
        assert v in c and len(c) == 50


def test_single_candidate_is_nearest_vertex():
    rng = np.random.default_rng(2)
    from bodyfit.mesh import TriangleMesh

    pts = rng.random((300, 3))
    m = TriangleMesh(pts, [[0, 1, 2]])
    q = rng.random((5, 3))
    cands = candidate_labels(m, q, 1)
    for c, p in zip(cands, q):
        assert c.tolist() == [int(np.argmin(np.linalg.norm(pts - p, axis=1)))]


def test_candidates_match_linear_scan():
    rng = np.random.default_rng(3)
    from bodyfit.mesh import TriangleMesh

    pts = rng.random((500, 3))
    m = TriangleMesh(pts, [[0, 1, 2]])
    q = rng.random((4, 3))
    for c, p in zip(candidate_labels(m, q, 25), q):
        brute = np.sort(np.argsort(np.linalg.norm(pts - p, axis=1), kind="stable")[:25])
        assert np.array_equal(c, brute)


# ---- inference ------------------------------------------------------------------------

def test_max_product_matches_brute_force_on_random_trees():
    rng = np.random.default_rng(11)
    for _ in range(100):
        topo = random_tree(rng)
        nodes, edges = random_scores(rng, topo)
        labels, score = max_product(nodes, edges, topo)
        ref, best = brute_force_map(nodes, edges, topo)
        assert np.array_equal(labels, ref)
        assert score == pytest.approx(best, abs=1e-9)


def test_five_node_subtree_exhaustive():
    rng = np.random.default_rng(12)
    topo = LandmarkTopology("abcde", [(0, 1), (0, 2), (2, 3), (2, 4)])
    nodes = [rng.normal(size=6) for _ in range(5)]
    edges = [rng.normal(size=(6, 6)) for _ in range(4)]
    labels, _ = max_product(nodes, edges, topo)
    assert np.array_equal(labels, brute_force_map(nodes, edges, topo)[0])


def _frame_and_alignment(trained):
    ts, model = trained
    frame = FrameGeometry(ts.meshes[1], anchor_count=100)
    return model, frame, RigidTransform(np.eye(3), np.zeros(3))


def test_forced_assignment_scores_direct_sum(trained):
    model, frame, align = _frame_and_alignment(trained)
    idx = trained[0].landmarks[1]
    res = max_product_infer(model, frame, [np.array([i]) for i in idx], align)
    assert np.array_equal(res.indices, idx)
    assert res.log_probability == pytest.approx(joint_log_probability(model, frame, idx, align), abs=1e-9)


def test_inferred_log_probability_is_joint_density(trained):
    model, frame, align = _frame_and_alignment(trained)
    ts = trained[0]
    cands = candidate_labels(frame.mesh, frame.mesh.vertices[ts.landmarks[1]], 6)
    res = max_product_infer(model, frame, cands, align)
    assert res.log_probability == pytest.approx(joint_log_probability(model, frame, res.indices, align), abs=1e-9)
    for c, v in zip(cands, res.indices):
        assert v in c


def test_duplicate_candidate_does_not_change_result(trained):
    model, frame, align = _frame_and_alignment(trained)
    ts = trained[0]
    cands = candidate_labels(frame.mesh, frame.mesh.vertices[ts.landmarks[1]], 5)
    a = max_product_infer(model, frame, cands, align)
    dup = [np.concatenate([c, c[:2]]) for c in cands]
    b = max_product_infer(model, frame, dup, align)
    assert np.array_equal(a.indices, b.indices)


# ---- tracking ---------------------------------------------------------------------------

def test_constant_sequence_keeps_landmarks(trained):
    ts, model = trained
    m = ts.meshes[0]
    out = track_landmarks(model, [m, m, m], ts.landmarks[0], k=30, anchor_count=100)
    for a in out[1:]:
        assert np.array_equal(a.indices, out[0].indices)


def test_rigid_motion_is_tracked(trained):
    from scipy.spatial.transform import Rotation

    ts, model = trained
    m = ts.meshes[0]
    centre = m.vertices.mean(axis=0)
    axis = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])
    frames = []
    for s in range(5):
        # slow motion: 0.02 rad and 1 cm per frame
        R = Rotation.from_rotvec(0.02 * s * axis).as_matrix()
        frames.append(m.transformed(R, centre - R @ centre + [0.01 * s, 0.0, 0.0]))
    out = track_landmarks(model, frames, ts.landmarks[0], k=40, anchor_count=100)
    h = average_edge_length(m)
    for f, a in zip(frames, out):
        err = np.linalg.norm(a.positions - f.vertices[ts.landmarks[0]], axis=1)
        assert err.max() < h


def test_rigid_invariance_of_selection(trained):
    ts, model = trained
    frames = [ts.meshes[0], ts.meshes[1]]
    a = track_landmarks(model, frames, ts.landmarks[0], k=30, anchor_count=100)
    R, t = random_rigid(np.random.default_rng(8))
    moved = [f.transformed(R, t) for f in frames]
    b = track_landmarks(model, moved, ts.landmarks[0], k=30, anchor_count=100)
    assert np.array_equal(a[1].indices, b[1].indices)


def test_squat_has_no_left_right_swap(trained):
    _, model = trained
    # first half of the 31-frame squat, down to the deepest posture
    seq = generate_sequence(SynthBodyParams(1.02, 1.0, 1.05), squat_curve(31)[:16], RES)
    frames = [f.mesh for f in seq]
    out = track_landmarks(model, frames, seq[0].landmarks, k=60, anchor_count=100)
    pairs = [(DEFAULT_LANDMARKS.index(f"l_{p}"), DEFAULT_LANDMARKS.index(f"r_{p}"))
             for p in ("shoulder", "elbow", "wrist", "hip", "knee", "ankle")]
    for f, a in zip(seq, out):
        truth = f.mesh.vertices[f.landmarks]
        for l, r in pairs:
            assert np.linalg.norm(a.positions[l] - truth[l]) < np.linalg.norm(a.positions[l] - truth[r])
            assert np.linalg.norm(a.positions[r] - truth[r]) < np.linalg.norm(a.positions[r] - truth[l])
