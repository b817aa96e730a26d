"""Rotation helpers shared by the posture and non-rigid fits."""

import numpy as np

AXIS_FLOOR = 1e-12


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_matrix(axis, angle):
    """Rotation by ``angle`` about ``axis`` (normalized here, 1e-12 floor)."""
    axis = np.asarray(axis, dtype=float)
    k = axis / max(np.linalg.norm(axis), AXIS_FLOOR)
    K = skew(k)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * K @ K


def rotvec_matrix(rotvec):
    """Rodrigues map of a rotation vector (axis * angle)."""
    v = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(v)
    K = skew(v)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def rotvec_matrix_derivatives(rotvec):
    """``R`` and ``dR/dv_i`` (shape (3, 3, 3), index i first) for a rotation vector.

    Uses the closed form of Gallego & Yezzi; at the origin the derivative is
    the generator ``[e_i]_x``.
    """
    v = np.asarray(rotvec, dtype=float)
    R = rotvec_matrix(v)
    theta2 = v.dot(v)
    E = np.eye(3)
    if theta2 < 1e-16:
        return R, skew(E)
    V = skew(v)
    # row i of skew(W.T) is [v x (I - R) e_i]_x
    W = V @ (np.eye(3) - R)
    dR = (v[:, None, None] * V + skew(W.T)) @ R / theta2
    return R, dR


def cross_rows(a, b):
    """Row-wise cross product of (n, 3) arrays without ``np.cross`` overhead."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _unit_axes(axis):
    r = np.asarray(axis, dtype=float)
    norm = np.maximum(np.sqrt(np.einsum("ij,ij->i", r, r)), AXIS_FLOOR)
    return r / norm[:, None], norm


def rotate_rows(axis, angle, t):
    """Rotated vectors only; same convention as :func:`rotate_axis_angle`."""
    k, _ = _unit_axes(axis)
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    kdt = np.einsum("ij,ij->i", k, t)[:, None]
    return t * c + cross_rows(k, t) * s + k * kdt * (1.0 - c)


def rotate_rows_vjp(axis, angle, t, g):
    """Gradients of ``sum(g * rotate_rows(axis, angle, t))`` w.r.t. the raw axis and the angle."""
    k, norm = _unit_axes(axis)
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    kdt = np.einsum("ij,ij->i", k, t)[:, None]
    kdg = np.einsum("ij,ij->i", k, g)[:, None]
    kxt = cross_rows(k, t)
    d_angle = np.einsum("ij,ij->i", -t * s + kxt * c + k * kdt * s, g)
    gk = s * cross_rows(t, g) + (1.0 - c) * (kdt * g + t * kdg)
    # normalization: (I - k k^T) / |r|
    d_axis = (gk - k * np.einsum("ij,ij->i", k, gk)[:, None]) / norm[:, None]
    return d_axis, d_angle


def rotate_axis_angle(axis, angle, t):
    """Rotate vectors ``t`` (n, 3) about per-row axes ``axis`` (n, 3) by ``angle`` (n,).

    Returns the rotated vectors and the partial derivatives with respect to the
    raw (unnormalized) axis, shape (n, 3, 3) as d out / d axis, and to the
    angle, shape (n, 3).
    """
    r = np.asarray(axis, dtype=float)
    norm = np.maximum(np.linalg.norm(r, axis=1), AXIS_FLOOR)
    k = r / norm[:, None]
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    kxt = np.cross(k, t)
    kdt = np.einsum("ij,ij->i", k, t)[:, None]
    out = t * c + kxt * s + k * kdt * (1.0 - c)
    d_angle = -t * s + kxt * c + k * kdt * s
    # d out / d k = s * (-[t]_x) + (1 - c) * (kdt I + k t^T)
    dk = -s[:, :, None] * skew(t) + (1.0 - c)[:, :, None] * (
        kdt[:, :, None] * np.eye(3)[None] + k[:, :, None] * t[:, None, :]
    )
    # chain through normalization: dk/dr = (I - k k^T) / |r|
    P = (np.eye(3)[None] - k[:, :, None] * k[:, None, :]) / norm[:, None, None]
    d_axis = dk @ P
    return out, d_axis, d_angle
