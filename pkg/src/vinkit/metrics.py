"""Trajectory accuracy and consistency metrics: alignment, ATE, RPE, NEES."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import manifold as mf
from .errors import AlignmentFailed, ContractViolation
from .imu import ImuState

ASSOCIATION_TOL = 1e-3


@dataclass(frozen=True)
class TrajectoryPair:
    """Matched estimated / ground-truth poses (quaternions ``[w,x,y,z]``)."""

    t: np.ndarray
    est_p: np.ndarray
    est_q: np.ndarray
    gt_p: np.ndarray
    gt_q: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        for name in ("est_p", "gt_p"):
            if np.shape(getattr(self, name)) != (n, 3):
                raise ContractViolation(f"{name} must have shape ({n}, 3)")
        for name in ("est_q", "gt_q"):
            if np.shape(getattr(self, name)) != (n, 4):
                raise ContractViolation(f"{name} must have shape ({n}, 4)")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_states(cls, t, est: Sequence[ImuState], gt: Sequence[ImuState]) -> "TrajectoryPair":
        return cls(
            np.asarray(t, dtype=float),
            np.array([s.t for s in est]).reshape(-1, 3),
            np.array([s.q for s in est]).reshape(-1, 4),
            np.array([s.t for s in gt]).reshape(-1, 3),
            np.array([s.q for s in gt]).reshape(-1, 4),
        )


def associate(t_est: np.ndarray, t_gt: np.ndarray, tol: float = ASSOCIATION_TOL):
    """Nearest-neighbour timestamp matching; returns index arrays ``(i_est, i_gt)``."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if len(t_gt) == 0 or len(t_est) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    pos = np.clip(np.searchsorted(t_gt, t_est), 1, len(t_gt) - 1) if len(t_gt) > 1 else np.zeros(len(t_est), int)
    left = np.maximum(pos - 1, 0)
    pick = np.where(np.abs(t_gt[left] - t_est) <= np.abs(t_gt[pos] - t_est), left, pos)
    ok = np.abs(t_gt[pick] - t_est) <= tol
    return np.nonzero(ok)[0], pick[ok]


def make_pair(t_est, est_p, est_q, t_gt, gt_p, gt_q, tol: float = ASSOCIATION_TOL) -> TrajectoryPair:
    ie, ig = associate(t_est, t_gt, tol)
    if len(ie) < 2:
        raise ContractViolation(f"only {len(ie)} timestamps matched within {tol} s; need at least 2")
    return TrajectoryPair(
        np.asarray(t_est, dtype=float)[ie],
        np.asarray(est_p, dtype=float)[ie],
        np.asarray(est_q, dtype=float)[ie],
        np.asarray(gt_p, dtype=float)[ig],
        np.asarray(gt_q, dtype=float)[ig],
    )


def apply_transform(pair: TrajectoryPair, R: np.ndarray, t: np.ndarray) -> TrajectoryPair:
    """Map the estimate through ``x -> R x + t`` (orientations left-multiplied)."""
    qR = mf.rotmat_to_quat(R)
    est_q = np.array([mf.quat_mul(qR, q) for q in pair.est_q]).reshape(-1, 4)
    return replace(pair, est_p=pair.est_p @ R.T + t, est_q=est_q)


def align(pair: TrajectoryPair, mode: str = "four_dof"):
    """Least-squares rigid alignment of the estimate onto ground truth.

    Returns ``(aligned_pair, R, t)`` such that ``R @ est + t`` best matches
    ``gt`` in the sum-of-squares sense.  ``four_dof`` restricts ``R`` to yaw.
    """
    if len(pair) < 2:
        raise ContractViolation("alignment needs at least two matched poses")
    me = pair.est_p.mean(axis=0)
    mg = pair.gt_p.mean(axis=0)
    E = pair.est_p - me
    G = pair.gt_p - mg
    if mode == "se3":
        if len(pair) < 3:
            raise AlignmentFailed("se3 alignment needs at least three positions")
        sv = np.linalg.svd(E, compute_uv=False)
        if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
            raise AlignmentFailed("positions are collinear; rotation is not determined")
        U, _, Vt = np.linalg.svd(G.T @ E)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
        R = U @ D @ Vt
    elif mode == "four_dof":
        s = float(np.sum(E[:, 0] * G[:, 1] - E[:, 1] * G[:, 0]))
        c = float(np.sum(E[:, 0] * G[:, 0] + E[:, 1] * G[:, 1]))
        scale = float(np.sum(E[:, :2] ** 2) + np.sum(G[:, :2] ** 2))
        if scale == 0.0 or math.hypot(s, c) <= 1e-12 * scale:
            raise AlignmentFailed("horizontal motion is degenerate; yaw is not determined")
        R = mf.yaw_rotation(math.atan2(s, c))
    else:
        raise ContractViolation(f"unknown alignment mode {mode!r}")
    t = mg - R @ me
    return apply_transform(pair, R, t), R, t


def position_errors(pair: TrajectoryPair) -> np.ndarray:
    return np.linalg.norm(pair.est_p - pair.gt_p, axis=1)


def ate(pair: TrajectoryPair) -> float:
    """Root-mean-square position error of an (already aligned) pair."""
    if len(pair) == 0:
        raise ContractViolation("ATE of an empty trajectory pair")
    e = position_errors(pair)
    return float(math.sqrt(np.mean(e * e)))


@dataclass(frozen=True)
class RpeResult:
    start_times: np.ndarray
    trans: np.ndarray
    rot: np.ndarray

    @property
    def trans_rmse(self) -> float:
        return float(math.sqrt(np.mean(self.trans**2))) if len(self.trans) else 0.0

    @property
    def rot_rmse(self) -> float:
        return float(math.sqrt(np.mean(self.rot**2))) if len(self.rot) else 0.0


def _relative(p_i, R_i, p_j, R_j):
    return R_i.T @ R_j, R_i.T @ (p_j - p_i)


def rpe(pair: TrajectoryPair, delta: float, unit: str = "s") -> RpeResult:
    """Relative pose error over segments of length ``delta`` (seconds or meters).

    Per segment ``E = (gt_i^-1 gt_j)^-1 (est_i^-1 est_j)``; translation and
    rotation magnitudes of ``E`` are reported separately.
    """
    if not delta > 0.0:
        raise ContractViolation("RPE segment length must be positive")
    if unit == "s":
        axis = np.asarray(pair.t, dtype=float)
    elif unit == "m":
        steps = np.linalg.norm(np.diff(pair.gt_p, axis=0), axis=1)
        axis = np.concatenate([[0.0], np.cumsum(steps)])
    else:
        raise ContractViolation(f"unknown RPE unit {unit!r}")
    if len(axis) < 2 or axis[-1] - axis[0] < delta - 1e-9:
        raise ContractViolation("RPE segment is longer than the trajectory")
    Rg = [mf.quat_to_rotmat(q) for q in pair.gt_q]
    Re = [mf.quat_to_rotmat(q) for q in pair.est_q]
    starts, tr, rot = [], [], []
    for i in range(len(axis)):
        j = int(np.searchsorted(axis, axis[i] + delta - 1e-9))
        if j >= len(axis):
            break
        Rgr, tgr = _relative(pair.gt_p[i], Rg[i], pair.gt_p[j], Rg[j])
        Rer, ter = _relative(pair.est_p[i], Re[i], pair.est_p[j], Re[j])
        starts.append(pair.t[i])
        tr.append(float(np.linalg.norm(Rgr.T @ (ter - tgr))))
        rot.append(float(np.linalg.norm(mf.so3_log(Rgr.T @ Rer))))
    return RpeResult(np.array(starts), np.array(tr), np.array(rot))


def nees_value(error: np.ndarray, P: np.ndarray) -> float:
    """``e^T P^-1 e`` via Cholesky; a singular or indefinite ``P`` is rejected."""
    P = np.asarray(P, dtype=float)
    if P.shape != (len(error), len(error)):
        raise ContractViolation(f"covariance shape {P.shape} does not match error length {len(error)}")
    try:
        L = np.linalg.cholesky(0.5 * (P + P.T))
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("covariance is singular or not positive definite") from exc
    if np.min(np.abs(np.diag(L))) <= 1e-12 * max(1.0, float(np.max(np.abs(np.diag(L))))):
        raise ContractViolation("covariance is numerically singular")
    y = np.linalg.solve(L, error)
    return float(y @ y)


def nees(
    estimates: Sequence[ImuState],
    covariances: Sequence[np.ndarray],
    truths: Sequence[ImuState],
    pose_only: bool = False,
):
    """Per-step NEES and its average.

    The error is ``estimate ⊖ truth`` on the 15-dim error state, or its first
    six entries (position, rotation) with ``pose_only``.
    """
    if not (len(estimates) == len(covariances) == len(truths)) or len(estimates) == 0:
        raise ContractViolation("NEES needs equally long, non-empty sequences")
    vals = []
    for est, P, gt in zip(estimates, covariances, truths):
        e = est.boxminus(gt)
        P = np.asarray(P, dtype=float)
        if pose_only:
            e, P = e[:6], P[:6, :6]
        vals.append(nees_value(e, P))
    vals = np.array(vals)
    return vals, float(vals.mean())
