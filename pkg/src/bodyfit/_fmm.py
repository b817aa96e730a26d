"""Numba kernel for fast marching on triangle meshes."""

import heapq

import numpy as np
from numba import njit


@njit(cache=True)
def _triangle_update(pa, pb, pc, da, db):
    # planar wavefront through a, b reaching c; falls back to edge paths
    ea = pa - pc
    eb = pb - pc
    la = np.sqrt(ea[0] * ea[0] + ea[1] * ea[1] + ea[2] * ea[2])
    lb = np.sqrt(eb[0] * eb[0] + eb[1] * eb[1] + eb[2] * eb[2])
    dijkstra = min(da + la, db + lb)
    g00 = la * la
    g11 = lb * lb
    g01 = ea[0] * eb[0] + ea[1] * eb[1] + ea[2] * eb[2]
    det = g00 * g11 - g01 * g01
    if det <= 1e-30 * g00 * g11:
        return dijkstra
    # Q = inverse Gram matrix
    q00 = g11 / det
    q11 = g00 / det
    q01 = -g01 / det
    s1 = q00 + q11 + 2.0 * q01
    sd = (q00 + q01) * da + (q01 + q11) * db
    dd = q00 * da * da + 2.0 * q01 * da * db + q11 * db * db
    disc = sd * sd - s1 * (dd - 1.0)
    if disc < 0.0:
        return dijkstra
    p = (sd + np.sqrt(disc)) / s1
    if p < max(da, db):
        return dijkstra
    # upwind test: incoming direction must lie inside the angle at c
    c0 = q00 * (p - da) + q01 * (p - db)
    c1 = q01 * (p - da) + q11 * (p - db)
    if c0 < 0.0 or c1 < 0.0:
        return dijkstra
    return min(p, dijkstra)


@njit(cache=True)
def fast_marching(vertices, faces, vf_ptr, vf_idx, sources, source_dist, stop_distance):
    n = vertices.shape[0]
    dist = np.full(n, np.inf)
    alive = np.zeros(n, dtype=np.bool_)
    heap = [(0.0, np.int64(0))]
    heap.pop()
    for i in range(sources.shape[0]):
        s = sources[i]
        if source_dist[i] < dist[s]:
            dist[s] = source_dist[i]
            heapq.heappush(heap, (source_dist[i], np.int64(s)))
    while len(heap) > 0:
        d, v = heapq.heappop(heap)
        if alive[v] or d > dist[v]:
            continue
        alive[v] = True
        if d > stop_distance:
            break
        for fi in range(vf_ptr[v], vf_ptr[v + 1]):
            f = vf_idx[fi]
            for corner in range(3):
                c = faces[f, corner]
                if alive[c]:
                    continue
                # the third vertex of the face
                o = -1
                for k in range(3):
                    w = faces[f, k]
                    if w != c and w != v:
                        o = w
                if o >= 0 and alive[o]:
                    cand = _triangle_update(vertices[v], vertices[o], vertices[c], dist[v], dist[o])
                else:
                    e = vertices[c] - vertices[v]
                    cand = dist[v] + np.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
                if cand < dist[c]:
                    dist[c] = cand
                    heapq.heappush(heap, (cand, np.int64(c)))
    return dist


@njit(cache=True)
def sublevel_area(faces, face_areas, dist, radii):
    """Area of the sublevel sets of a per-vertex distance, linear on faces."""
    out = np.zeros(len(radii))
    rmax = radii[-1]
    for f in range(len(faces)):
        d0 = dist[faces[f, 0]]
        d1 = dist[faces[f, 1]]
        d2 = dist[faces[f, 2]]
        # sort corners so d0 <= d1 <= d2
        if d0 > d1:
            d0, d1 = d1, d0
        if d1 > d2:
            d1, d2 = d2, d1
        if d0 > d1:
            d0, d1 = d1, d0
        if d0 > rmax:
            continue
        # unreached corners: a huge finite value keeps the ratios well defined
        d1 = min(d1, 1e300)
        d2 = min(d2, 1e300)
        A = face_areas[f]
        for k in range(len(radii)):
            a = radii[k]
            if a >= d2:
                out[k] += A
            elif a >= d1:
                # whole face minus the corner beyond the level line
                out[k] += A * (1.0 - (d2 - a) / (d2 - d0) * (d2 - a) / (d2 - d1))
            elif a >= d0 and d1 > d0:
                out[k] += A * (a - d0) / (d1 - d0) * (a - d0) / (d2 - d0)
    return out
