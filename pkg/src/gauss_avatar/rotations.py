"""Quaternion and rotation-matrix helpers.

Quaternions are stored as ``(w, x, y, z)`` along the last axis.
"""

from __future__ import annotations

import numpy as np


def quat_norm(q: np.ndarray) -> np.ndarray:
    # explicit sum keeps the result independent of array layout
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.sqrt(w * w + x * x + y * y + z * z)


def quat_normalize(q: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Normalize quaternions; near-zero ones become the identity."""
    q = np.asarray(q, dtype=np.float64)
    n = quat_norm(q)
    bad = n < eps
    safe = np.where(bad, 1.0, n)
    out = q / safe[..., None]
    if np.any(bad):
        out = np.where(bad[..., None], np.array([1.0, 0.0, 0.0, 0.0]), out)
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (not necessarily unit) quaternions, shape ``(..., 3, 3)``."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
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


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Convert rotation matrices to unit quaternions with ``w >= 0``.

    Uses Shepperd's method, picking the numerically largest pivot per matrix.
    """
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    out = np.empty((m.shape[0], 4))
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    diag = np.stack([m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=-1)
    pivot = np.where(tr > diag.max(axis=-1), 3, diag.argmax(axis=-1))

    sel = pivot == 3
    if np.any(sel):
        s = np.sqrt(1.0 + tr[sel]) * 2.0
        mm = m[sel]
        out[sel] = np.stack(
            [
                0.25 * s,
                (mm[:, 2, 1] - mm[:, 1, 2]) / s,
                (mm[:, 0, 2] - mm[:, 2, 0]) / s,
                (mm[:, 1, 0] - mm[:, 0, 1]) / s,
            ],
            axis=-1,
        )
    sel = pivot == 0
    if np.any(sel):
        mm = m[sel]
        s = np.sqrt(1.0 + mm[:, 0, 0] - mm[:, 1, 1] - mm[:, 2, 2]) * 2.0
        out[sel] = np.stack(
            [
                (mm[:, 2, 1] - mm[:, 1, 2]) / s,
                0.25 * s,
                (mm[:, 0, 1] + mm[:, 1, 0]) / s,
                (mm[:, 0, 2] + mm[:, 2, 0]) / s,
            ],
            axis=-1,
        )
    sel = pivot == 1
    if np.any(sel):
        mm = m[sel]
        s = np.sqrt(1.0 + mm[:, 1, 1] - mm[:, 0, 0] - mm[:, 2, 2]) * 2.0
        out[sel] = np.stack(
            [
                (mm[:, 0, 2] - mm[:, 2, 0]) / s,
                (mm[:, 0, 1] + mm[:, 1, 0]) / s,
                0.25 * s,
                (mm[:, 1, 2] + mm[:, 2, 1]) / s,
            ],
            axis=-1,
        )
    sel = pivot == 2
    if np.any(sel):
        mm = m[sel]
        s = np.sqrt(1.0 + mm[:, 2, 2] - mm[:, 0, 0] - mm[:, 1, 1]) * 2.0
        out[sel] = np.stack(
            [
                (mm[:, 1, 0] - mm[:, 0, 1]) / s,
                (mm[:, 0, 2] + mm[:, 2, 0]) / s,
                (mm[:, 1, 2] + mm[:, 2, 1]) / s,
                0.25 * s,
            ],
            axis=-1,
        )
    out = np.where(out[:, :1] < 0, -out, out)
    out = quat_normalize(out)
    return out.reshape(batch + (4,))


def axis_angle_to_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed unit quaternions."""
    q = rng.normal(size=(n, 4))
    return quat_normalize(q)
