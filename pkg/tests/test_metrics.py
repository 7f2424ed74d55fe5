import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation
from scipy.stats import chi2

from vinkit import manifold as mf
from vinkit import metrics
from vinkit.errors import AlignmentFailed, ContractViolation

from conftest import random_state


def random_pair(rng, n=30):
    t = np.arange(n, dtype=float) * 0.1
    p = np.cumsum(rng.normal(size=(n, 3)), axis=0)
    q = np.array([mf.quat_exp(rng.normal(size=3)) for _ in range(n)])
    return t, p, q


def transformed(p, q, R, off):
    qR = mf.rotmat_to_quat(R)
    return p @ R.T + off, np.array([mf.quat_mul(qR, x) for x in q])


@pytest.mark.parametrize("mode", ["se3", "four_dof"])
def test_identical_trajectories_align_to_identity(rng, mode):
    t, p, q = random_pair(rng)
    _, R, off = metrics.align(metrics.TrajectoryPair(t, p, q, p, q), mode)
    assert_allclose(R, np.eye(3), atol=1e-12)
    assert_allclose(off, np.zeros(3), atol=1e-12)


@pytest.mark.parametrize("mode", ["se3", "four_dof"])
def test_alignment_recovers_inverse_transform(rng, mode):
    t, p, q = random_pair(rng)
    R = mf.so3_exp(rng.normal(size=3)) if mode == "se3" else mf.yaw_rotation(1.1)
    off = rng.normal(size=3) * 5
    est_p, est_q = transformed(p, q, R, off)
    aligned, Ra, ta = metrics.align(metrics.TrajectoryPair(t, est_p, est_q, p, q), mode)
    assert np.max(np.abs(Ra - R.T)) < 1e-10
    assert np.max(np.abs(ta + R.T @ off)) < 1e-10
    assert metrics.ate(aligned) < 1e-10
    assert_allclose(aligned.est_q, q, atol=1e-10)


def _aligned_cost(est, gt, R, off):
    return float(np.sum((est @ R.T + off - gt) ** 2))


def test_four_dof_alignment_is_the_brute_force_optimum():
    rng = np.random.default_rng(31)
    gt = rng.normal(size=(3, 3)) * 2
    est = gt @ mf.yaw_rotation(0.4).T + [1.0, -2.0, 0.5] + 0.1 * rng.normal(size=(3, 3))
    q = np.tile(mf.IDENTITY_QUAT, (3, 1))
    _, R, off = metrics.align(metrics.TrajectoryPair(np.arange(3.0), est, q, gt, q), "four_dof")
    best = _aligned_cost(est, gt, R, off)

    # refine a yaw grid; for a fixed rotation the best translation is the centroid offset
    lo, hi = -math.pi, math.pi
    for _ in range(12):
        yaws = np.linspace(lo, hi, 201)
        costs = []
        for y in yaws:
            Ry = mf.yaw_rotation(y)
            costs.append(_aligned_cost(est, gt, Ry, gt.mean(0) - Ry @ est.mean(0)))
        k = int(np.argmin(costs))
        step = yaws[1] - yaws[0]
        lo, hi = yaws[k] - step, yaws[k] + step
    assert abs(best - min(costs)) < 1e-8


def test_se3_alignment_is_the_brute_force_optimum():
    rng = np.random.default_rng(32)
    gt = rng.normal(size=(3, 3)) * 2
    est = gt @ mf.so3_exp([0.3, -0.2, 0.5]).T + [1.0, 0.0, 2.0] + 0.1 * rng.normal(size=(3, 3))
    q = np.tile(mf.IDENTITY_QUAT, (3, 1))
    _, R, off = metrics.align(metrics.TrajectoryPair(np.arange(3.0), est, q, gt, q), "se3")
    best = _aligned_cost(est, gt, R, off)

    def cost(v):
        Rv = Rotation.from_rotvec(v).as_matrix()
        return _aligned_cost(est, gt, Rv, gt.mean(0) - Rv @ est.mean(0))

    # coarse grid over rotation vectors, then local refinement from the best cells
    grid = np.linspace(-math.pi, math.pi, 13)
    cands = sorted((cost(np.array(v)), tuple(v)) for v in np.array(np.meshgrid(grid, grid, grid)).reshape(3, -1).T)
    found = min(
        minimize(cost, np.array(v), method="Nelder-Mead", options=dict(xatol=1e-12, fatol=1e-15, maxiter=20000)).fun
        for _, v in cands[:5]
    )
    assert abs(best - found) < 1e-8
    assert best <= found + 1e-12


def test_degenerate_alignment_fails():
    t = np.arange(5.0)
    p = np.outer(t, [1.0, 2.0, 0.5])
    q = np.tile(mf.IDENTITY_QUAT, (5, 1))
    with pytest.raises(AlignmentFailed):
        metrics.align(metrics.TrajectoryPair(t, p, q, p, q), "se3")
    vertical = np.outer(t, [0.0, 0.0, 1.0])
    with pytest.raises(AlignmentFailed):
        metrics.align(metrics.TrajectoryPair(t, vertical, q, vertical, q), "four_dof")


def test_ate_examples():
    q = np.tile(mf.IDENTITY_QUAT, (3, 1))
    gt = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 1.0, 0.0]])
    assert metrics.ate(metrics.TrajectoryPair(np.arange(3.0), gt, q, gt, q)) == 0.0
    shifted = gt + [0.0, 1.0, 0.0]
    assert metrics.ate(metrics.TrajectoryPair(np.arange(3.0), shifted, q, gt, q)) == 1.0
    # errors of 5 m, 0 m, 1 m: sqrt((25 + 0 + 1) / 3)
    est = gt + np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert math.isclose(metrics.ate(metrics.TrajectoryPair(np.arange(3.0), est, q, gt, q)), 2.943920288775949, rel_tol=1e-15)


def test_ate_rejects_empty_pair():
    z3, z4 = np.zeros((0, 3)), np.zeros((0, 4))
    with pytest.raises(ContractViolation):
        metrics.ate(metrics.TrajectoryPair(np.zeros(0), z3, z4, z3, z4))


def test_ate_invariant_to_shared_rigid_transform(rng):
    t, p, q = random_pair(rng)
    est_p = p + 0.1 * rng.normal(size=p.shape)
    R, off = mf.so3_exp(rng.normal(size=3)), rng.normal(size=3)
    a, qa = transformed(est_p, q, R, off)
    b, qb = transformed(p, q, R, off)
    assert math.isclose(
        metrics.ate(metrics.TrajectoryPair(t, est_p, q, p, q)),
        metrics.ate(metrics.TrajectoryPair(t, a, qa, b, qb)),
        rel_tol=1e-12,
    )


def test_rpe_identical_is_zero(rng):
    t, p, q = random_pair(rng)
    res = metrics.rpe(metrics.TrajectoryPair(t, p, q, p, q), 0.5)
    assert len(res.trans) == len(t) - 5
    assert np.max(res.trans) < 1e-12 and np.max(res.rot) < 1e-7


def test_rpe_grows_linearly_with_velocity_error(rng):
    t, p, q = random_pair(rng)
    v_err = np.array([0.3, -0.4, 0.0])
    res = metrics.rpe(metrics.TrajectoryPair(t, p + np.outer(t, v_err), q, p, q), 1.0)
    assert_allclose(res.trans, 0.5 * 1.0, rtol=1e-10)


def test_rpe_invariant_to_global_transform(rng):
    t, p, q = random_pair(rng)
    est_p = p + 0.05 * rng.normal(size=p.shape)
    est_q = np.array([mf.quat_mul(x, mf.quat_exp(0.01 * rng.normal(size=3))) for x in q])
    base = metrics.rpe(metrics.TrajectoryPair(t, est_p, est_q, p, q), 0.5)
    a, qa = transformed(est_p, est_q, mf.so3_exp(rng.normal(size=3)), rng.normal(size=3))
    moved = metrics.rpe(metrics.TrajectoryPair(t, a, qa, p, q), 0.5)
    assert_allclose(moved.trans, base.trans, atol=1e-10)
    assert_allclose(moved.rot, base.rot, atol=1e-10)


def scripted_rpe(t, est_p, est_q, gt_p, gt_q, delta):
    """Homogeneous-matrix RPE written independently with scipy rotations."""

    def T(p, q):
        M = np.eye(4)
        M[:3, :3] = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        M[:3, 3] = p
        return M

    tr, rot = [], []
    for i in range(len(t)):
        later = np.nonzero(t >= t[i] + delta - 1e-9)[0]
        if len(later) == 0:
            break
        j = later[0]
        Eg = np.linalg.inv(T(gt_p[i], gt_q[i])) @ T(gt_p[j], gt_q[j])
        Ee = np.linalg.inv(T(est_p[i], est_q[i])) @ T(est_p[j], est_q[j])
        E = np.linalg.inv(Eg) @ Ee
        tr.append(np.linalg.norm(E[:3, 3]))
        rot.append(Rotation.from_matrix(E[:3, :3]).magnitude())
    return np.array(tr), np.array(rot)


def test_rpe_matches_scripted_implementation(rng):
    t, p, q = random_pair(rng, 60)
    est_p = p + 0.05 * rng.normal(size=p.shape)
    est_q = np.array([mf.quat_mul(x, mf.quat_exp(0.02 * rng.normal(size=3))) for x in q])
    res = metrics.rpe(metrics.TrajectoryPair(t, est_p, est_q, p, q), 1.0)
    tr, rot = scripted_rpe(t, est_p, est_q, p, q, 1.0)
    assert_allclose(res.trans, tr, atol=1e-10)
    assert_allclose(res.rot, rot, atol=1e-10)


def test_rpe_in_meters(rng):
    t = np.arange(11.0)
    p = np.outer(t, [1.0, 0.0, 0.0])
    q = np.tile(mf.IDENTITY_QUAT, (11, 1))
    res = metrics.rpe(metrics.TrajectoryPair(t, p, q, p, q), 3.0, unit="m")
    assert len(res.trans) == 8


def test_rpe_rejects_long_segments(rng):
    t, p, q = random_pair(rng, 5)
    with pytest.raises(ContractViolation):
        metrics.rpe(metrics.TrajectoryPair(t, p, q, p, q), 10.0)


def test_association_respects_tolerance():
    ie, ig = metrics.associate(np.array([0.0, 0.1004, 0.2, 0.35]), np.array([0.0, 0.1, 0.2, 0.3]), tol=1e-3)
    assert_array_equal(ie, [0, 1, 2])
    assert_array_equal(ig, [0, 1, 2])


def test_nees_zero_error(rng):
    x = random_state(rng)
    vals, avg = metrics.nees([x], [np.eye(15)], [x])
    assert avg == 0.0


def test_nees_scales_inversely_with_covariance(rng):
    x = random_state(rng)
    y = x.boxplus(0.1 * rng.normal(size=15))
    A = rng.normal(size=(15, 15))
    P = A @ A.T + np.eye(15)
    one = metrics.nees([y], [P], [x])[1]
    two = metrics.nees([y], [2.0 * P], [x])[1]
    assert math.isclose(one, 2.0 * two, rel_tol=1e-12)
    pose = metrics.nees([y], [P], [x], pose_only=True)[1]
    assert math.isclose(pose, metrics.nees_value(y.boxminus(x)[:6], P[:6, :6]), rel_tol=1e-14)


def test_nees_rejects_singular_covariance(rng):
    x = random_state(rng)
    P = np.eye(15)
    P[4, 4] = 0.0
    with pytest.raises(ContractViolation):
        metrics.nees([x], [P], [x])


def toy_filter_nees(rng, steps=50):
    """Constant-velocity 1-D Kalman filter on its own model; final 2-dim NEES."""
    dt, q, r = 0.1, 0.01, 0.25
    F = np.array([[1.0, dt], [0.0, 1.0]])
    Q = q * np.array([[dt**3 / 3, dt**2 / 2], [dt**2 / 2, dt]])
    H = np.array([[1.0, 0.0]])
    P = np.eye(2)
    x_true = rng.multivariate_normal(np.zeros(2), P)
    x = np.zeros(2)
    for _ in range(steps):
        x_true = F @ x_true + rng.multivariate_normal(np.zeros(2), Q)
        x, P = F @ x, F @ P @ F.T + Q
        z = H @ x_true + math.sqrt(r) * rng.standard_normal(1)
        S = H @ P @ H.T + r
        K = P @ H.T / S
        x = x + (K @ (z - H @ x)).ravel()
        P = (np.eye(2) - K @ H) @ P
    return metrics.nees_value(x - x_true, P)


def test_linear_gaussian_filter_is_consistent():
    rng = np.random.default_rng(77)
    runs = 100
    vals = np.array([toy_filter_nees(rng) for _ in range(runs)])
    lo, hi = chi2.ppf([0.025, 0.975], 2 * runs) / runs
    assert lo <= vals.mean() <= hi
    # chi-square(2) has variance 4, so the standard error of the mean is 2 / sqrt(runs)
    assert abs(vals.mean() - 2.0) < 3 * 2.0 / math.sqrt(runs)


def test_pair_shape_validation():
    with pytest.raises(ContractViolation):
        metrics.TrajectoryPair(np.arange(3.0), np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((3, 3)), np.zeros((3, 4)))


def test_pair_from_states(rng):
    xs = [random_state(rng) for _ in range(4)]
    pair = metrics.TrajectoryPair.from_states(np.arange(4.0), xs, xs)
    assert_array_equal(pair.est_p[2], xs[2].t)
