"""Distance metrics between fitted meshes and reference data, and their tables."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh

DEFAULT_THRESHOLDS = np.linspace(0.0, 0.05, 51)


def _points(x):
    if isinstance(x, TriangleMesh):
        return x.vertices[x.valid]
    return np.asarray(x, dtype=float)


def nn_distances(result, reference) -> np.ndarray:
    """Distance from each result vertex to the nearest reference point."""
    d, _ = cKDTree(_points(reference)).query(_points(result))
    return d


def vertex_rms(a, b) -> float:
    """RMS distance between corresponding vertices."""
    A, B = _points(a), _points(b)
    if A.shape != B.shape:
        raise ValueError("vertex correspondence requires equal vertex counts")
    return float(np.sqrt(np.mean(np.sum((A - B) ** 2, axis=1))))


def cumulative_distribution(distances, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Fraction of distances at or below each threshold."""
    d = np.sort(np.asarray(distances, dtype=float))
    return np.searchsorted(d, np.asarray(thresholds), side="right") / max(len(d), 1)


def frame_statistics(per_frame_distances) -> np.ndarray:
    """(n, 2) array of per-frame mean and standard deviation."""
    return np.array([[np.mean(d), np.std(d)] for d in per_frame_distances])


def write_table(path, header, rows):
    """Tab-separated table with a header line."""
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(v if isinstance(v, str) else repr(float(v)) if not isinstance(v, (int, np.integer))
                               else str(int(v)) for v in row) + "\n")


def read_table(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    return header, rows
