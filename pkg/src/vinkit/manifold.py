"""Rotation algebra on unit quaternions and SO(3), plus generic boxplus/boxminus.

Quaternions are numpy arrays ``[w, x, y, z]`` (Hamilton convention, scalar
first).  Every quaternion returned from this module is unit-norm and
canonicalized to ``w >= 0``; when ``w == 0`` the first nonzero vector
component is made positive.

Rotation vectors are *full* angles: ``quat_exp(theta)`` rotates by
``|theta|`` radians about ``theta / |theta|``.  The half-angle division of the
pure-quaternion form ``exp([0, theta/2])`` happens internally.

Perturbations use the right-hand convention::

    boxplus(X, tau)  = X * Exp(tau)
    boxminus(Y, X)   = Log(X^-1 * Y)
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation

SMALL_ANGLE = 1e-8

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


_UNIT_SLACK = 4.0 * np.finfo(float).eps


def _floats(a) -> list:
    # plain Python floats are much cheaper than numpy scalars for small kernels
    return np.asarray(a, dtype=float).tolist()


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ u == np.cross(v, u)``."""
    x, y, z = _floats(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def canonical(q: np.ndarray) -> np.ndarray:
    """Normalize ``q`` and flip its sign so that ``w >= 0``."""
    return _canonical4(*_floats(q))


def _canonical4(w: float, x: float, y: float, z: float) -> np.ndarray:
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if not n > 0.0 or not math.isfinite(n):
        raise ContractViolation(f"cannot normalize quaternion {[w, x, y, z]}")
    if abs(n - 1.0) <= _UNIT_SLACK:
        # already unit up to rounding; dividing by 1 keeps canonical idempotent
        n = 1.0
    if w < 0.0 or (w == 0.0 and next((c for c in (x, y, z) if c != 0.0), 0.0) < 0.0):
        n = -n
    return np.array([w / n, x / n, y / n, z / n])


def quat_exp(theta: np.ndarray) -> np.ndarray:
    """Unit quaternion of the rotation vector ``theta`` (radians)."""
    x, y, z = _floats(theta)
    angle = math.sqrt(x * x + y * y + z * z)
    if angle < SMALL_ANGLE:
        return _canonical4(1.0, 0.5 * x, 0.5 * y, 0.5 * z)
    half = 0.5 * angle
    s = math.sin(half) / angle
    return _canonical4(math.cos(half), x * s, y * s, z * s)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of ``q`` with norm in ``[0, pi]``.

    ``q`` is canonicalized first, so ``q`` and ``-q`` give the same answer.  At
    exactly ``pi`` the returned axis is the (canonical) vector part direction.
    """
    q = canonical(q)
    w = q[0]
    v = q[1:]
    n = math.sqrt(float(v @ v))
    if n < SMALL_ANGLE:
        # atan2(n, w) / n ~ 1/w - n^2 / (3 w^3)
        return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    return v * (2.0 * math.atan2(n, w) / n)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` (renormalized, canonical)."""
    aw, ax, ay, az = _floats(a)
    bw, bx, by, bz = _floats(b)
    return _canonical4(
        aw * bw - ax * bx - ay * by - az * bz,
        # paired so that conj(q) * q cancels exactly
        (aw * bx + ax * bw) + (ay * bz - az * by),
        (aw * by + ay * bw) + (az * bx - ax * bz),
        (aw * bz + az * bw) + (ax * by - ay * bx),
    )


def quat_inv(q: np.ndarray) -> np.ndarray:
    w, x, y, z = _floats(q)
    return _canonical4(w, -x, -y, -z)


def omega_matrix(w: np.ndarray) -> np.ndarray:
    """4x4 matrix with ``omega_matrix(w) @ q == [0, w] ⊗ q``."""
    w1, w2, w3 = _floats(w)
    return np.array(
        [
            [0.0, -w1, -w2, -w3],
            [w1, 0.0, -w3, w2],
            [w2, w3, 0.0, -w1],
            [w3, -w2, w1, 0.0],
        ]
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = _floats(q)
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    i = int(np.argmax(diag))
    if i == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical(np.array(q))


def so3_exp(theta: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    theta = np.asarray(theta, dtype=float)
    t2 = float(theta @ theta)
    K = skew(theta)
    if t2 < SMALL_ANGLE**2:
        return np.eye(3) + K + 0.5 * K @ K
    t = math.sqrt(t2)
    return np.eye(3) + (math.sin(t) / t) * K + ((1.0 - math.cos(t)) / t2) * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    return quat_log(rotmat_to_quat(R))


def right_jacobian(theta: np.ndarray) -> np.ndarray:
    """``Exp(theta + d) ≈ Exp(theta) Exp(J_r(theta) d)``."""
    theta = np.asarray(theta, dtype=float)
    t2 = float(theta @ theta)
    K = skew(theta)
    if t2 < 1e-10:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    t = math.sqrt(t2)
    return np.eye(3) - ((1.0 - math.cos(t)) / t2) * K + ((t - math.sin(t)) / (t2 * t)) * K @ K


def right_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    """``Log(Exp(theta) Exp(d)) ≈ theta + J_r^-1(theta) d``."""
    theta = np.asarray(theta, dtype=float)
    t2 = float(theta @ theta)
    K = skew(theta)
    if t2 < 1e-10:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    t = math.sqrt(t2)
    c = 1.0 / t2 - (1.0 + math.cos(t)) / (2.0 * t * math.sin(t))
    return np.eye(3) + 0.5 * K + c * K @ K


def left_jacobian(theta: np.ndarray) -> np.ndarray:
    return right_jacobian(-np.asarray(theta, dtype=float))


def left_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    return right_jacobian_inv(-np.asarray(theta, dtype=float))


def quat_boxplus(q: np.ndarray, dtheta: np.ndarray) -> np.ndarray:
    return quat_mul(q, quat_exp(dtheta))


def quat_boxminus(q1: np.ndarray, q0: np.ndarray) -> np.ndarray:
    return quat_log(quat_mul(quat_inv(q0), q1))


def boxplus(x, tau):
    """Retract tangent vector ``tau`` onto ``x``.

    ``x`` is either an object with a ``boxplus`` method (e.g. ``ImuState``) or
    a plain vector, in which case this is ordinary addition.
    """
    if hasattr(x, "boxplus"):
        return x.boxplus(tau)
    x = np.asarray(x, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if x.shape != tau.shape:
        raise ContractViolation(f"boxplus dimension mismatch: {x.shape} vs {tau.shape}")
    return x + tau


def boxminus(y, x):
    """Tangent vector ``tau`` with ``boxplus(x, tau) == y``."""
    if hasattr(x, "boxminus"):
        if type(y) is not type(x):
            raise ContractViolation(f"boxminus between {type(y).__name__} and {type(x).__name__}")
        return y.boxminus(x)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape != y.shape:
        raise ContractViolation(f"boxminus dimension mismatch: {y.shape} vs {x.shape}")
    return y - x


def tangent_dim(x) -> int:
    if hasattr(x, "tangent_dim"):
        return x.tangent_dim
    return int(np.asarray(x).size)


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(R: np.ndarray) -> float:
    """Heading of a ZYX-Euler rotation matrix."""
    return math.atan2(R[1, 0], R[0, 0])
