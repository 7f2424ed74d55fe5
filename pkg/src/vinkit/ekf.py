"""Error-state EKF with Euclidean landmarks kept in the state.

The covariance is ordered ``(imu error (15), landmark_0 (3), landmark_1 (3), ...)``
with landmarks sorted by id.  Every operation returns a new ``FilterState``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import manifold as mf
from .camera import CameraModel, FeatureObservation, observe_jacobians
from .errors import ContractViolation, InitializationDeferred, PointNotVisible
from .imu import ImuState, NoiseParams, as_stream, discretize, error_jacobians, propagate_step

# chi-square 0.999 quantile with 2 degrees of freedom: -2 ln(0.001)
CHI2_GATE_2DOF = -2.0 * math.log(1e-3)
MIN_PARALLAX_DEG = 3.0
INIT_INFLATION = 2.0


@dataclass
class FilterState:
    imu: ImuState
    landmarks: dict[int, np.ndarray]
    P: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.landmarks = {int(k): np.asarray(self.landmarks[k], dtype=float) for k in sorted(self.landmarks)}
        n = 15 + 3 * len(self.landmarks)
        if self.P.shape != (n, n):
            raise ContractViolation(f"covariance is {self.P.shape}, expected ({n}, {n})")

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def index(self, landmark_id: int) -> int:
        """Offset of a landmark's block in ``P``."""
        for k, lid in enumerate(self.landmarks):
            if lid == landmark_id:
                return 15 + 3 * k
        raise ContractViolation(f"landmark {landmark_id} is not in the filter state")

    def boxplus(self, delta: np.ndarray) -> "FilterState":
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (self.dim,):
            raise ContractViolation(f"filter correction must have {self.dim} entries")
        lms = {lid: L + delta[15 + 3 * k : 18 + 3 * k] for k, (lid, L) in enumerate(self.landmarks.items())}
        return FilterState(self.imu.boxplus(delta[:15]), lms, self.P, self.timestamp)

    def boxminus(self, other: "FilterState") -> np.ndarray:
        if list(self.landmarks) != list(other.landmarks):
            raise ContractViolation("filter states hold different landmark sets")
        parts = [self.imu.boxminus(other.imu)]
        parts += [self.landmarks[k] - other.landmarks[k] for k in self.landmarks]
        return np.concatenate(parts)


@dataclass
class UpdateReport:
    n_observations: int = 0
    n_accepted: int = 0
    gated_ids: list[int] = field(default_factory=list)
    mahalanobis: dict[int, float] = field(default_factory=dict)
    iterations: int = 0

    @property
    def all_gated(self) -> bool:
        return self.n_observations > 0 and self.n_accepted == 0


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def filter_propagate(
    fs: FilterState, samples, noise: NoiseParams, integrator: str = "rk4", order: int = 4
) -> FilterState:
    """Propagate mean and covariance across the samples (first sample at ``fs`` time)."""
    stream = as_stream(samples)
    g = noise.gravity_vector
    Qc = noise.Q()
    Phi_tot = np.eye(15)
    Q_tot = np.zeros((15, 15))
    x = fs.imu
    for i, dt in enumerate(np.diff(stream.t)):
        dt = float(dt)
        F, G = error_jacobians(x, stream[i])
        Phi, Qk = discretize(F, G, Qc, dt, order)
        Phi_tot = Phi @ Phi_tot
        Q_tot = Phi @ Q_tot @ Phi.T + Qk
        x = propagate_step(x, stream.gyro[i], stream.accel[i], dt, g, integrator)
    P = fs.P.copy()
    P[:15, :15] = _sym(Phi_tot @ fs.P[:15, :15] @ Phi_tot.T + Q_tot)
    if P.shape[0] > 15:
        P[:15, 15:] = Phi_tot @ fs.P[:15, 15:]
        P[15:, :15] = P[:15, 15:].T
    return FilterState(x, fs.landmarks, P, float(stream.t[-1]))


def kalman_update(P: np.ndarray, H: np.ndarray, r: np.ndarray, R: np.ndarray):
    """Linear Kalman correction; returns ``(delta, P_joseph, K)``."""
    S = H @ P @ H.T + R
    try:
        L = np.linalg.cholesky(_sym(S))
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("innovation covariance is not invertible") from exc
    # K = P H^T S^-1
    PHt = P @ H.T
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    delta = K @ r
    IKH = np.eye(P.shape[0]) - K @ H
    Pn = IKH @ P @ IKH.T + K @ R @ K.T
    return delta, _sym(Pn), K


def _reset_jacobian(dim: int, dtheta: np.ndarray) -> np.ndarray:
    J = np.eye(dim)
    J[3:6, 3:6] = mf.right_jacobian(dtheta)
    return J


def _linearize(fs: FilterState, obs: Sequence[FeatureObservation], model: CameraModel):
    n = len(obs)
    H = np.zeros((2 * n, fs.dim))
    r = np.zeros(2 * n)
    for k, o in enumerate(obs):
        px, Jx, JL = observe_jacobians(fs.imu, fs.landmarks[o.landmark_id], model)
        c = fs.index(o.landmark_id)
        H[2 * k : 2 * k + 2, :15] = Jx
        H[2 * k : 2 * k + 2, c : c + 3] = JL
        r[2 * k : 2 * k + 2] = np.asarray(o.pixel, dtype=float) - px
    return H, r


def filter_update(
    fs: FilterState,
    observations: Sequence[FeatureObservation],
    model: CameraModel,
    sigma_px: float | None = None,
    gate: float | None = CHI2_GATE_2DOF,
    iterated: bool = False,
    max_iters: int = 30,
    tol: float = 1e-10,
):
    """Visual update with per-observation Mahalanobis gating and Joseph form.

    Pixels are expected undistorted.  Returns ``(new_state, UpdateReport)``.
    With ``iterated`` the measurement model is relinearized until the
    correction norm drops below ``tol`` (iterated EKF).
    """
    sigma = model.sigma_px if sigma_px is None else sigma_px
    if not sigma > 0.0:
        raise ContractViolation("pixel noise must be positive")
    report = UpdateReport(n_observations=len(observations))
    accepted: list[FeatureObservation] = []
    for o in observations:
        if o.landmark_id not in fs.landmarks:
            raise ContractViolation(f"observation of unknown landmark {o.landmark_id}")
        try:
            H, r = _linearize(fs, [o], model)
        except PointNotVisible:
            report.gated_ids.append(o.landmark_id)
            continue
        S = H @ fs.P @ H.T + sigma * sigma * np.eye(2)
        try:
            d2 = float(r @ np.linalg.solve(S, r))
        except np.linalg.LinAlgError as exc:
            raise ContractViolation("innovation covariance is not invertible") from exc
        report.mahalanobis[o.landmark_id] = d2
        if gate is not None and d2 > gate:
            report.gated_ids.append(o.landmark_id)
            continue
        accepted.append(o)
    report.n_accepted = len(accepted)
    if not accepted:
        return fs, report

    Rm = sigma * sigma * np.eye(2 * len(accepted))
    if not iterated:
        H, r = _linearize(fs, accepted, model)
        delta, Pn, _ = kalman_update(fs.P, H, r, Rm)
        out = fs.boxplus(delta)
        J = _reset_jacobian(fs.dim, delta[3:6])
        report.iterations = 1
        return FilterState(out.imu, out.landmarks, _sym(J @ Pn @ J.T), fs.timestamp), report

    x = fs
    Pn = fs.P
    eps = np.zeros(fs.dim)
    for it in range(1, max_iters + 1):
        e = x.boxminus(fs)
        Jinv = _reset_jacobian(fs.dim, e[3:6])  # inverse of the boxminus Jacobian
        Pi = Jinv @ fs.P @ Jinv.T
        m = -Jinv @ e
        H, r = _linearize(x, accepted, model)
        step, Pn, _ = kalman_update(Pi, H, r - H @ m, Rm)
        eps = m + step
        x = x.boxplus(eps)
        report.iterations = it
        if np.linalg.norm(eps) < tol:
            break
    J = _reset_jacobian(fs.dim, eps[3:6])
    return FilterState(x.imu, x.landmarks, _sym(J @ Pn @ J.T), fs.timestamp), report


def _ray_world(state: ImuState, px: np.ndarray, model: CameraModel) -> np.ndarray:
    m = np.array([(px[0] - model.cx) / model.fx, (px[1] - model.cy) / model.fy, 1.0])
    d = state.R @ model.R_CI.T @ m
    return d / np.linalg.norm(d)


def parallax_deg(views: Sequence[tuple[ImuState, np.ndarray]], model: CameraModel) -> float:
    """Largest angle between any two observation rays (degrees)."""
    rays = np.array([_ray_world(s, px, model) for s, px in views])
    if len(rays) < 2:
        return 0.0
    cross = np.cross(rays[:, None, :], rays[None, :, :])
    ang = np.arctan2(np.linalg.norm(cross, axis=-1), rays @ rays.T)
    return math.degrees(float(ang.max()))


def triangulate(
    views: Sequence[tuple[ImuState, np.ndarray]],
    model: CameraModel,
    sigma_px: float | None = None,
    min_parallax_deg: float = MIN_PARALLAX_DEG,
    refine_iters: int = 10,
):
    """Linear triangulation refined by Gauss-Newton on pixel error.

    Returns ``(point, covariance)`` where the covariance is the inverse of the
    reprojection normal matrix (poses held fixed).
    """
    if len(views) < 2:
        raise InitializationDeferred("need at least two views to triangulate")
    if parallax_deg(views, model) < min_parallax_deg:
        raise InitializationDeferred("insufficient parallax")
    sigma = model.sigma_px if sigma_px is None else sigma_px
    rows, rhs = [], []
    for s, px in views:
        A = model.R_CI @ s.R.T
        b = model.t_CI - A @ s.t
        x = (px[0] - model.cx) / model.fx
        y = (px[1] - model.cy) / model.fy
        rows += [x * A[2] - A[0], y * A[2] - A[1]]
        rhs += [b[0] - x * b[2], b[1] - y * b[2]]
    L = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    for _ in range(refine_iters):
        N = np.zeros((3, 3))
        g = np.zeros(3)
        try:
            for s, px in views:
                pred, _, JL = observe_jacobians(s, L, model)
                N += JL.T @ JL
                g += JL.T @ (np.asarray(px) - pred)
        except PointNotVisible as exc:
            raise InitializationDeferred("triangulated point is behind a camera") from exc
        step = np.linalg.solve(N, g)
        L = L + step
        if np.linalg.norm(step) < 1e-12 * max(1.0, np.linalg.norm(L)):
            break
    N = np.zeros((3, 3))
    try:
        for s, _ in views:
            _, _, JL = observe_jacobians(s, L, model)
            N += JL.T @ JL
    except PointNotVisible as exc:
        raise InitializationDeferred("triangulated point is behind a camera") from exc
    cov = np.linalg.inv(N) * sigma * sigma
    return L, _sym(cov)


def initialize_landmark(
    fs: FilterState,
    landmark_id: int,
    views: Sequence[tuple[ImuState, np.ndarray]],
    model: CameraModel,
    sigma_px: float | None = None,
    min_parallax_deg: float = MIN_PARALLAX_DEG,
    correlated: bool = True,
    inflation: float = INIT_INFLATION,
) -> FilterState:
    """Triangulate a new landmark and append it to the state.

    The landmark covariance is the inflated triangulation covariance.  With
    ``correlated`` the point is anchored to the current IMU pose: its
    uncertainty and cross-covariance also carry the current pose uncertainty
    through ``L = t + R L_I``.  Otherwise cross-covariances are zero.
    """
    if landmark_id in fs.landmarks:
        raise ContractViolation(f"landmark {landmark_id} already in the state")
    L, cov = triangulate(views, model, sigma_px, min_parallax_deg)
    cov = inflation * cov
    n = fs.dim
    if correlated:
        M = np.zeros((3, 15))
        M[:, 0:3] = np.eye(3)
        M[:, 3:6] = -fs.imu.R @ mf.skew(fs.imu.R.T @ (L - fs.imu.t))
        cross = M @ fs.P[:15, :]
        P_LL = M @ fs.P[:15, :15] @ M.T + cov
    else:
        cross = np.zeros((3, n))
        P_LL = cov

    ids = sorted(list(fs.landmarks) + [landmark_id])
    k = ids.index(landmark_id)
    c = 15 + 3 * k
    perm = np.r_[0:c, n : n + 3, c:n]
    big = np.zeros((n + 3, n + 3))
    big[:n, :n] = fs.P
    big[n:, :n] = cross
    big[:n, n:] = cross.T
    big[n:, n:] = _sym(P_LL)
    P = big[np.ix_(perm, perm)]
    lms = dict(fs.landmarks)
    lms[landmark_id] = L
    return FilterState(fs.imu, lms, P, fs.timestamp)


def marginalize_landmark(fs: FilterState, landmark_id: int) -> FilterState:
    """Drop a landmark; for a Gaussian in covariance form this is block deletion."""
    c = fs.index(landmark_id)
    keep = np.r_[0:c, c + 3 : fs.dim]
    lms = {k: v for k, v in fs.landmarks.items() if k != landmark_id}
    return FilterState(fs.imu, lms, fs.P[np.ix_(keep, keep)], fs.timestamp)
