"""Body measurements: height and torso circumferences from planar sections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import TriangleMesh

WAIST_LEVEL = 0.62
CHEST_LEVEL = 0.72


class MeasurementError(ValueError):
    pass


@dataclass
class BodyMeasurements:
    height: float
    waist: float
    chest: float

    def as_dict(self) -> dict:
        return {"height": self.height, "waist": self.waist, "chest": self.chest}


def _plane_basis(normal):
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    a = np.eye(3)[np.argmin(np.abs(n))]
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return n, u, np.cross(n, u)


def section_loops(mesh: TriangleMesh, normal, level: float) -> list:
    """Closed (or open, at boundaries) polylines where the plane ``x . n = level`` cuts the mesh."""
    n = np.asarray(normal, dtype=float) / np.linalg.norm(normal)
    h = mesh.vertices @ n
    span = max(np.ptp(h), 1e-300)
    if np.any(np.abs(h - level) < 1e-12 * span):
        level = level + 1e-9 * span  # keep vertices off the plane
    above = h > level
    f = mesh.faces
    cnt = above[f].sum(axis=1)
    crossing = f[(cnt == 1) | (cnt == 2)]
    point_of = {}
    links: dict = {}
    for tri in crossing:
        keys = []
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            if above[a] != above[b]:
                key = (min(a, b), max(a, b))
                if key not in point_of:
                    t = (level - h[key[0]]) / (h[key[1]] - h[key[0]])
                    point_of[key] = mesh.vertices[key[0]] + t * (mesh.vertices[key[1]] - mesh.vertices[key[0]])
                keys.append(key)
        links.setdefault(keys[0], []).append(keys[1])
        links.setdefault(keys[1], []).append(keys[0])
    loops = []
    seen = set()
    for start in links:
        if start in seen:
            continue
        # walk from an open end if the component has one
        comp_start = start
        loop = [comp_start]
        seen.add(comp_start)
        prev, cur = None, comp_start
        while True:
            nxt = [k for k in links[cur] if k != prev and k not in seen]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            seen.add(cur)
            loop.append(cur)
        loops.append(np.array([point_of[k] for k in loop]))
    return loops


def _inside(poly2, p):
    x, y = poly2[:, 0], poly2[:, 1]
    x2, y2 = np.roll(x, -1), np.roll(y, -1)
    cond = (y > p[1]) != (y2 > p[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x + (p[1] - y) * (x2 - x) / (y2 - y)
    return int(np.sum(cond & (p[0] < xc))) % 2 == 1


def circumference(mesh: TriangleMesh, normal, level: float, axis_point=None) -> float:
    """Convex-hull perimeter of the section loop that encloses the vertical axis."""
    n, u, w = _plane_basis(normal)
    loops = section_loops(mesh, n, level)
    if not loops:
        raise MeasurementError(f"plane at {level:.4f} does not intersect the mesh")
    c = mesh.vertices.mean(axis=0) if axis_point is None else np.asarray(axis_point, dtype=float)
    c2 = np.array([c @ u, c @ w])
    polys = [np.column_stack([L @ u, L @ w]) for L in loops]
    chosen = [p for p in polys if len(p) >= 3 and _inside(p, c2)]
    if chosen:
        poly = min(chosen, key=lambda p: np.ptp(p, axis=0).prod())
    else:
        poly = min(polys, key=lambda p: np.linalg.norm(p.mean(axis=0) - c2))
    if len(poly) < 3:
        raise MeasurementError("degenerate section")
    # for 2-D hulls scipy reports the perimeter as "area"
    return float(ConvexHull(poly).area)


def measure_body(mesh: TriangleMesh, floor_normal=(0.0, 0.0, 1.0), waist_level: float = WAIST_LEVEL,
                 chest_level: float = CHEST_LEVEL) -> BodyMeasurements:
    n = np.asarray(floor_normal, dtype=float) / np.linalg.norm(floor_normal)
    h = mesh.vertices @ n
    lo, height = h.min(), float(np.ptp(h))
    return BodyMeasurements(
        height,
        circumference(mesh, n, lo + waist_level * height),
        circumference(mesh, n, lo + chest_level * height),
    )
