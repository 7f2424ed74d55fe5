"""Factor types for the sliding-window graph.

Every factor exposes ``linearize(values) -> (r, [J_k])`` returning the
*whitened* residual and one whitened Jacobian block per connected key, taken
with respect to right-perturbations ``x_k ⊕ δ_k``.  ``cost(values)`` is the
(possibly robustified) squared norm of the whitened residual.
"""

from __future__ import annotations

import math
from typing import Hashable, Sequence

import numpy as np

from .. import manifold as mf
from ..camera import Z_MIN, CameraModel
from ..errors import ContractViolation, PointNotVisible
from ..imu import ImuState, PreintegratedImu, boxminus_jacobian

HUBER_K = 1.345


def _sqrt_info(cov: np.ndarray) -> np.ndarray:
    """Upper factor ``S`` with ``S^T S = cov^-1``."""
    try:
        L = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("noise covariance is singular or indefinite") from exc
    return np.linalg.inv(L)


def huber_weight(norm: np.ndarray, k: float | None) -> np.ndarray:
    if k is None:
        return np.ones_like(norm)
    return np.where(norm <= k, 1.0, k / np.maximum(norm, 1e-300))


def huber_cost(norm: np.ndarray, k: float | None) -> np.ndarray:
    """Huber penalty scaled so inliers cost exactly ``norm**2``."""
    if k is None:
        return norm * norm
    return np.where(norm <= k, norm * norm, 2.0 * k * norm - k * k)


class Factor:
    kind = "generic"
    keys: tuple[Hashable, ...] = ()

    def linearize(self, values) -> tuple[np.ndarray, list[np.ndarray]]:
        raise NotImplementedError

    def residual(self, values) -> np.ndarray:
        return self.linearize(values)[0]

    def cost(self, values) -> float:
        r = self.residual(values)
        return float(r @ r)


def _diff(x, x0) -> np.ndarray:
    return x.boxminus(x0) if isinstance(x, ImuState) else mf.boxminus(x, x0)


def _local(x, x0) -> tuple[np.ndarray, np.ndarray]:
    """``x ⊖ x0`` and its Jacobian with respect to a perturbation of ``x``."""
    if isinstance(x, ImuState):
        e = x.boxminus(x0)
        return e, boxminus_jacobian(e)
    e = mf.boxminus(x, x0)
    return e, np.eye(len(e))


class PriorFactor(Factor):
    """``S (x ⊖ x_prior)`` on a single variable."""

    kind = "prior"

    def __init__(self, key, prior, cov: np.ndarray):
        self.keys = (key,)
        self.prior = prior
        self.sqrt_info = _sqrt_info(np.asarray(cov, dtype=float))

    def residual(self, values):
        return self.sqrt_info @ _diff(values[self.keys[0]], self.prior)

    def linearize(self, values):
        e, J = _local(values[self.keys[0]], self.prior)
        return self.sqrt_info @ e, [self.sqrt_info @ J]


class GaugePrior(Factor):
    """Pins world position and yaw of one IMU state (the unobservable directions)."""

    kind = "prior"

    def __init__(self, key, position: np.ndarray, R_ref: np.ndarray, sigma_p: float = 1e-6, sigma_yaw: float = 1e-6):
        if not (sigma_p > 0.0 and sigma_yaw > 0.0):
            raise ContractViolation("gauge prior sigmas must be positive")
        self.keys = (key,)
        self.position = np.asarray(position, dtype=float)
        self.R_ref = np.asarray(R_ref, dtype=float)
        self.sigma_p = sigma_p
        self.sigma_yaw = sigma_yaw

    def _yaw_error(self, x: ImuState):
        phi = mf.so3_log(x.R @ self.R_ref.T)
        r = np.concatenate([(x.t - self.position) / self.sigma_p, [phi[2] / self.sigma_yaw]])
        return r, phi

    def residual(self, values):
        return self._yaw_error(values[self.keys[0]])[0]

    def linearize(self, values):
        x: ImuState = values[self.keys[0]]
        R = x.R
        r, phi = self._yaw_error(x)
        J = np.zeros((4, 15))
        J[0:3, 0:3] = np.eye(3) / self.sigma_p
        J[3, 3:6] = (mf.left_jacobian_inv(phi) @ R)[2] / self.sigma_yaw
        return r, [J]


def imu_residual_body(xi: ImuState, xj: ImuState, p: PreintegratedImu, gravity: np.ndarray, jacobians: bool = False):
    """IMU residual expressed in the frame of ``xi``; optional 15x15 Jacobians.

    Order ``(position, rotation, velocity, b_g, b_a)`` matches the
    preintegrated covariance.
    """
    T = p.dt
    alpha, beta, gamma = p.corrected(xi.bg, xi.ba)
    Ri = xi.R
    dp_w = xj.t - xi.t - xi.v * T + 0.5 * T * T * gravity
    dv_w = xj.v - xi.v + gravity * T
    Rgam = mf.quat_to_rotmat(gamma)
    e_rot = mf.so3_log(Rgam.T @ Ri.T @ xj.R)
    e = np.concatenate([Ri.T @ dp_w - alpha, e_rot, Ri.T @ dv_w - beta, xj.bg - xi.bg, xj.ba - xi.ba])
    if not jacobians:
        return e
    Jr_inv = mf.right_jacobian_inv(e_rot)
    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    Ji[0:3, 0:3] = -Ri.T
    Ji[0:3, 3:6] = mf.skew(Ri.T @ dp_w)
    Ji[0:3, 6:9] = -Ri.T * T
    Ji[0:3, 9:12] = -p.dalpha_dbg
    Ji[0:3, 12:15] = -p.dalpha_dba
    Ji[3:6, 3:6] = -Jr_inv @ xj.R.T @ Ri
    phi = p.dgamma_dbg @ (xi.bg - p.bias_g)
    Ji[3:6, 9:12] = -Jr_inv @ mf.so3_exp(e_rot).T @ mf.right_jacobian(phi) @ p.dgamma_dbg
    Ji[6:9, 3:6] = mf.skew(Ri.T @ dv_w)
    Ji[6:9, 6:9] = -Ri.T
    Ji[6:9, 9:12] = -p.dbeta_dbg
    Ji[6:9, 12:15] = -p.dbeta_dba
    Ji[9:15, 9:15] = -np.eye(6)
    Jj[0:3, 0:3] = Ri.T
    Jj[3:6, 3:6] = Jr_inv
    Jj[6:9, 6:9] = Ri.T
    Jj[9:15, 9:15] = np.eye(6)
    return e, Ji, Jj


def imu_factor_residual(xi: ImuState, xj: ImuState, p: PreintegratedImu, gravity: np.ndarray) -> np.ndarray:
    """World-frame ``x_j ⊖ f(x_i, preintegration)`` (biases: ``b_j - b_i``)."""
    e = imu_residual_body(xi, xj, p, gravity)
    Ri = xi.R
    return np.concatenate([Ri @ e[0:3], e[3:6], Ri @ e[6:9], e[9:15]])


class ImuFactor(Factor):
    """Preintegrated IMU constraint between consecutive states.

    Weighted by the preintegrated covariance; in the body frame of ``x_i`` this
    is the same quadratic form as the world-frame residual weighted by the
    covariance rotated into the world.
    """

    kind = "imu"

    def __init__(self, key_i, key_j, preint: PreintegratedImu, gravity: np.ndarray):
        self.keys = (key_i, key_j)
        self.gravity = np.asarray(gravity, dtype=float)
        self.set_preintegration(preint)

    def set_preintegration(self, preint: PreintegratedImu) -> None:
        self.preint = preint
        cov = preint.cov.copy()
        # a vanishing random walk leaves the bias block singular; keep it invertible
        floor = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(cov)))))
        cov[np.diag_indices(15)] += floor
        self.sqrt_info = _sqrt_info(cov)

    def residual(self, values):
        return self.sqrt_info @ imu_residual_body(values[self.keys[0]], values[self.keys[1]], self.preint, self.gravity)

    def linearize(self, values):
        xi, xj = values[self.keys[0]], values[self.keys[1]]
        e, Ji, Jj = imu_residual_body(xi, xj, self.preint, self.gravity, jacobians=True)
        S = self.sqrt_info
        return S @ e, [S @ Ji, S @ Jj]


def visual_batch(state: ImuState, points: np.ndarray, pixels: np.ndarray, model: CameraModel, sigma: float):
    """Whitened pixel residuals ``(h - z) / sigma`` for many landmarks seen from one pose.

    Returns ``(r (n,2), J_x (n,2,15), J_L (n,2,3), valid (n,))``; rows with the
    point behind the camera are zeroed and flagged invalid.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    R = state.R
    L_I = (points - state.t) @ R
    L_C = L_I @ model.R_CI.T + model.t_CI
    z = L_C[:, 2]
    valid = z > Z_MIN
    iz = np.where(valid, 1.0 / np.where(valid, z, 1.0), 0.0)
    x, y = L_C[:, 0], L_C[:, 1]
    n = len(points)
    pred = np.stack([model.fx * x * iz + model.cx, model.fy * y * iz + model.cy], axis=1)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = model.fx * iz
    dproj[:, 0, 2] = -model.fx * x * iz * iz
    dproj[:, 1, 1] = model.fy * iz
    dproj[:, 1, 2] = -model.fy * y * iz * iz
    A = dproj @ model.R_CI
    J_L = A @ R.T
    J_x = np.zeros((n, 2, 15))
    J_x[:, :, 0:3] = -J_L
    # d L_I / d dtheta = skew(L_I)
    sk = np.zeros((n, 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -L_I[:, 2], L_I[:, 1]
    sk[:, 1, 0], sk[:, 1, 2] = L_I[:, 2], -L_I[:, 0]
    sk[:, 2, 0], sk[:, 2, 1] = -L_I[:, 1], L_I[:, 0]
    J_x[:, :, 3:6] = A @ sk
    r = (pred - pixels) / sigma
    r[~valid] = 0.0
    J_x[~valid] = 0.0
    J_L[~valid] = 0.0
    return r, J_x / sigma, J_L / sigma, valid


class VisualFactor(Factor):
    """Reprojection error of one landmark in one frame (undistorted pixels)."""

    kind = "visual"

    def __init__(self, key_x, key_l, pixel: np.ndarray, model: CameraModel, sigma: float, huber: float | None = HUBER_K):
        if not sigma > 0.0:
            raise ContractViolation("pixel noise must be positive")
        self.keys = (key_x, key_l)
        self.pixel = np.asarray(pixel, dtype=float).reshape(2)
        self.model = model
        self.sigma = float(sigma)
        self.huber = huber

    def _predicted_residual(self, values) -> np.ndarray | None:
        # projection only, for cost evaluation; None when behind the camera
        x: ImuState = values[self.keys[0]]
        m = self.model
        L_C = m.R_CI @ (x.R.T @ (np.asarray(values[self.keys[1]], dtype=float) - x.t)) + m.t_CI
        X, Y, Z = L_C.tolist()
        if not Z > Z_MIN:
            return None
        iz = 1.0 / Z
        return np.array([(m.fx * X * iz + m.cx - self.pixel[0]) / self.sigma, (m.fy * Y * iz + m.cy - self.pixel[1]) / self.sigma])

    def residual(self, values):
        r = self._predicted_residual(values)
        if r is None:
            raise PointNotVisible(f"landmark {self.keys[1]} is behind camera {self.keys[0]}")
        return r

    def raw(self, values):
        r, Jx, JL, valid = visual_batch(values[self.keys[0]], values[self.keys[1]][None], self.pixel[None], self.model, self.sigma)
        return r[0], Jx[0], JL[0], bool(valid[0])

    def linearize(self, values):
        r, Jx, JL, valid = self.raw(values)
        if not valid:
            raise PointNotVisible(f"landmark {self.keys[1]} is behind camera {self.keys[0]}")
        return r, [Jx, JL]

    def weight(self, values) -> float:
        r = self.raw(values)[0]
        return float(huber_weight(np.array([math.sqrt(r @ r)]), self.huber)[0])

    def cost(self, values) -> float:
        r = self._predicted_residual(values)
        if r is None:
            r = np.zeros(2)
        return float(huber_cost(np.array([math.sqrt(r @ r)]), self.huber)[0])


class DensePrior(Factor):
    """Linearized marginalization prior ``r0 + S (x ⊖ x_lin)`` over several keys."""

    kind = "prior"

    def __init__(self, keys: Sequence[Hashable], lin_values: dict, r0: np.ndarray, S: np.ndarray, dims: Sequence[int]):
        self.keys = tuple(keys)
        self.lin = {k: lin_values[k] for k in self.keys}
        self.r0 = np.asarray(r0, dtype=float)
        self.S = np.asarray(S, dtype=float)
        self.dims = list(dims)
        if self.S.shape != (len(self.r0), sum(self.dims)):
            raise ContractViolation("dense prior factor has inconsistent shapes")

    def residual(self, values):
        r = self.r0.copy()
        o = 0
        for k, d in zip(self.keys, self.dims):
            r += self.S[:, o : o + d] @ _diff(values[k], self.lin[k])
            o += d
        return r

    def linearize(self, values):
        r = self.r0.copy()
        blocks = []
        o = 0
        for k, d in zip(self.keys, self.dims):
            e, J = _local(values[k], self.lin[k])
            Sk = self.S[:, o : o + d]
            r += Sk @ e
            blocks.append(Sk @ J)
            o += d
        return r, blocks


class LinearFactor(Factor):
    """``sum_k A_k x_k - b`` on vector variables, already whitened."""

    kind = "linear"

    def __init__(self, keys: Sequence[Hashable], A: Sequence[np.ndarray], b: np.ndarray):
        self.keys = tuple(keys)
        self.A = [np.asarray(a, dtype=float) for a in A]
        self.b = np.asarray(b, dtype=float)

    def linearize(self, values):
        r = -self.b.copy()
        for k, a in zip(self.keys, self.A):
            r += a @ np.asarray(values[k], dtype=float)
        return r, list(self.A)
