"""Quaternion and rigid-transform helpers.

Quaternions are stored scalar-first, ``(w, x, y, z)``, and broadcast over any
number of leading axes.
"""
from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

# conj(q) = K @ q
_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


def qnormalize(q, eps=1e-12):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.maximum(n, eps)


def qconj(q):
    return np.asarray(q, dtype=float) * _CONJ


def qmul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def qleft_matrix(a):
    """Matrix ``L(a)`` with ``qmul(a, b) == L(a) @ b``."""
    a = np.asarray(a, dtype=float)
    w, x, y, z = np.moveaxis(a, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def qright_matrix(b):
    """Matrix ``R(b)`` with ``qmul(a, b) == R(b) @ a``."""
    b = np.asarray(b, dtype=float)
    w, x, y, z = np.moveaxis(b, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_to_matrix(q):
    """Rotation matrix of a (not necessarily unit) quaternion; normalizes first."""
    w, x, y, z = np.moveaxis(qnormalize(q), -1, 0)
    m = np.empty(np.shape(w) + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_to_matrix_vjp(q, grad_m):
    """Pull ``dL/dR`` (shape ``(..., 3, 3)``) back to ``dL/dq`` for the raw quaternion.

    The normalization inside :func:`quat_to_matrix` is differentiated too, so
    the result is orthogonal to ``q``.
    """
    q = np.asarray(q, dtype=float)
    norm = np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)
    u = q / norm
    w, x, y, z = np.moveaxis(u, -1, 0)
    g = np.asarray(grad_m, dtype=float)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    du = np.stack([dw, dx, dy, dz], axis=-1)
    return normalize_vjp(u, norm, du)


def normalize_vjp(u, norm, grad_u):
    """Backward of ``u = q / |q|`` given the unit vector and the norm."""
    radial = np.sum(grad_u * u, axis=-1, keepdims=True)
    return (grad_u - radial * u) / norm


def matrix_to_quat(m):
    """Unit quaternion (w >= 0) of a rotation matrix, batched."""
    from scipy.spatial.transform import Rotation

    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    xyzw = Rotation.from_matrix(flat).as_quat()
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    q = np.where(q[:, :1] < 0, -q, q)
    return q.reshape(m.shape[:-2] + (4,))


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def make_continuous(q):
    """Flip signs along axis 0 so consecutive quaternions lie in the same hemisphere."""
    q = np.array(q, dtype=float)
    for i in range(1, len(q)):
        if np.dot(q[i], q[i - 1]) < 0:
            q[i] = -q[i]
    return q


def to_local(points, trans, quat):
    """World points ``(..., n, 3)`` into the frame of pose ``(trans, quat)``.

    Returns the local points and the rotation matrices used. ``points`` carries
    one extra point axis relative to ``trans``/``quat``.
    """
    rot = quat_to_matrix(quat)
    local = np.einsum("...nk,...ki->...ni", points - trans[..., None, :], rot)
    return local, rot


def to_local_vjp(points, trans, quat, rot, grad_local):
    """Backward of :func:`to_local` for points, translation and raw quaternion."""
    grad_points = np.einsum("...ni,...ki->...nk", grad_local, rot)
    grad_trans = -grad_points.sum(axis=-2)
    rel = points - trans[..., None, :]
    grad_rot = np.einsum("...nk,...ni->...ki", rel, grad_local)
    grad_quat = quat_to_matrix_vjp(quat, grad_rot)
    return grad_points, grad_trans, grad_quat


def transform_points(points, trans, quat):
    rot = quat_to_matrix(quat)
    return np.einsum("...ij,...nj->...ni", rot, points) + trans[..., None, :]
