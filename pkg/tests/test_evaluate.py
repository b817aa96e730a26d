import numpy as np
import pytest

from bodyfit.evaluate import (cumulative_distribution, frame_statistics, nn_distances, read_table, vertex_rms,
                              write_table)
from bodyfit.mesh import TriangleMesh
from bodyfit.primitives import icosphere


def test_identical_meshes():
    m = icosphere(2)
    assert np.all(nn_distances(m, m) == 0) and vertex_rms(m, m) == 0


def test_translation_bound():
    m = icosphere(2)
    t = np.array([0.01, -0.02, 0.005])
    d = nn_distances(m.transformed(np.eye(3), t), m)
    assert np.all(d <= np.linalg.norm(t) + 1e-15)
    # isolated vertices: the bound is attained
    pts = np.array([[0.0, 0, 0], [10.0, 0, 0], [0, 10.0, 0]])
    assert np.allclose(nn_distances(pts + t, pts), np.linalg.norm(t), rtol=1e-12)
    assert vertex_rms(m.transformed(np.eye(3), t), m) == pytest.approx(np.linalg.norm(t), rel=1e-12)


def test_brute_force_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(150, 3))
    brute = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1)).min(axis=1)
    assert np.abs(nn_distances(a, b) - brute).max() < 1e-12


def test_invalid_reference_vertices_ignored():
    m = icosphere(1)
    valid = np.ones(m.n_vertices, dtype=bool)
    valid[0] = False
    ref = TriangleMesh(m.vertices, m.faces[~np.any(m.faces == 0, axis=1)], valid)
    assert nn_distances(m.vertices[:1], ref)[0] > 0


def test_cumulative_and_stats():
    d = np.array([0.0, 0.01, 0.02, 0.03])
    assert np.allclose(cumulative_distribution(d, [0.0, 0.015, 0.03]), [0.25, 0.5, 1.0])
    assert np.allclose(frame_statistics([d, 2 * d]), [[0.015, np.std(d)], [0.03, 2 * np.std(d)]])


def test_vertex_rms_shape_check():
    with pytest.raises(ValueError):
        vertex_rms(np.zeros((3, 3)), np.zeros((4, 3)))


def test_table_round_trip(tmp_path):
    write_table(tmp_path / "t.tsv", ["frame", "mean"], [[1, 0.1], [2, 1 / 3]])
    header, rows = read_table(tmp_path / "t.tsv")
    assert header == ["frame", "mean"] and rows[1] == ["2", repr(1 / 3)]
