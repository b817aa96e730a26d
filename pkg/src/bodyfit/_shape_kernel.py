"""Numba kernel for the non-rigid shape energy and its gradient."""

import numpy as np
from numba import njit


@njit(cache=True)
def shape_energy_kernel(v, p, targets, normals, mask, pairs, pair_weights,
                        w_data, w_cloth, w_smooth, axis_floor):
    """Returns ``(data, cloth, smooth, gradient)``; the gradient is of the weighted sum."""
    m = len(v)
    g = np.zeros((m, 7))
    units = np.empty((m, 3))
    norms = np.empty(m)
    data = 0.0
    cloth = 0.0
    gx = np.empty(3)
    for j in range(m):
        t0, t1, t2 = p[j, 0], p[j, 1], p[j, 2]
        r0, r1, r2 = p[j, 3], p[j, 4], p[j, 5]
        nr = max(np.sqrt(r0 * r0 + r1 * r1 + r2 * r2), axis_floor)
        k0, k1, k2 = r0 / nr, r1 / nr, r2 / nr
        units[j, 0], units[j, 1], units[j, 2] = k0, k1, k2
        norms[j] = nr
        if not mask[j]:
            continue
        c = np.cos(p[j, 6])
        s = np.sin(p[j, 6])
        kdt = k0 * t0 + k1 * t1 + k2 * t2
        x0 = k1 * t2 - k2 * t1
        x1 = k2 * t0 - k0 * t2
        x2 = k0 * t1 - k1 * t0
        d0 = v[j, 0] + t0 * c + x0 * s + k0 * kdt * (1.0 - c) - targets[j, 0]
        d1 = v[j, 1] + t1 * c + x1 * s + k1 * kdt * (1.0 - c) - targets[j, 1]
        d2 = v[j, 2] + t2 * c + x2 * s + k2 * kdt * (1.0 - c) - targets[j, 2]
        data += d0 * d0 + d1 * d1 + d2 * d2
        gx[0], gx[1], gx[2] = 2.0 * w_data * d0, 2.0 * w_data * d1, 2.0 * w_data * d2
        rho = normals[j, 0] * d0 + normals[j, 1] * d1 + normals[j, 2] * d2
        if rho > 0.0:
            cloth += rho
            gx[0] += w_cloth * normals[j, 0]
            gx[1] += w_cloth * normals[j, 1]
            gx[2] += w_cloth * normals[j, 2]
        kdg = k0 * gx[0] + k1 * gx[1] + k2 * gx[2]
        # translation: R^T gx
        g[j, 0] = gx[0] * c - (k1 * gx[2] - k2 * gx[1]) * s + k0 * kdg * (1.0 - c)
        g[j, 1] = gx[1] * c - (k2 * gx[0] - k0 * gx[2]) * s + k1 * kdg * (1.0 - c)
        g[j, 2] = gx[2] * c - (k0 * gx[1] - k1 * gx[0]) * s + k2 * kdg * (1.0 - c)
        # angle
        g[j, 6] = ((-t0 * s + x0 * c + k0 * kdt * s) * gx[0]
                   + (-t1 * s + x1 * c + k1 * kdt * s) * gx[1]
                   + (-t2 * s + x2 * c + k2 * kdt * s) * gx[2])
        # unit axis, then through the normalization
        q0 = s * (t1 * gx[2] - t2 * gx[1]) + (1.0 - c) * (kdt * gx[0] + t0 * kdg)
        q1 = s * (t2 * gx[0] - t0 * gx[2]) + (1.0 - c) * (kdt * gx[1] + t1 * kdg)
        q2 = s * (t0 * gx[1] - t1 * gx[0]) + (1.0 - c) * (kdt * gx[2] + t2 * kdg)
        kq = k0 * q0 + k1 * q1 + k2 * q2
        g[j, 3] = (q0 - k0 * kq) / nr
        g[j, 4] = (q1 - k1 * kq) / nr
        g[j, 5] = (q2 - k2 * kq) / nr

    smooth = 0.0
    g_unit = np.zeros((m, 3))
    for e in range(len(pairs)):
        a = pairs[e, 0]
        b = pairs[e, 1]
        w = pair_weights[e]
        per = 0.0
        coef = 4.0 * w_smooth * w
        for i in range(3):
            dt = p[a, i] - p[b, i]
            dr = units[a, i] - units[b, i]
            per += dt * dt + dr * dr
            g[a, i] += coef * dt
            g[b, i] -= coef * dt
            g_unit[a, i] += coef * dr
            g_unit[b, i] -= coef * dr
        da = p[a, 6] - p[b, 6]
        per += da * da
        g[a, 6] += coef * da
        g[b, 6] -= coef * da
        # each unordered pair belongs to both neighborhoods
        smooth += 2.0 * w * per
    for j in range(m):
        ku = units[j, 0] * g_unit[j, 0] + units[j, 1] * g_unit[j, 1] + units[j, 2] * g_unit[j, 2]
        for i in range(3):
            g[j, 3 + i] += (g_unit[j, i] - units[j, i] * ku) / norms[j]
    return data, cloth, smooth, g
