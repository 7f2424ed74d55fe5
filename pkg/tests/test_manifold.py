import math

import numpy as np
import pytest
from hypothesis import given
from numpy.testing import assert_allclose, assert_array_equal

from vinkit import manifold as mf
from vinkit.errors import ContractViolation
from vinkit.imu import ImuState

from conftest import imu_states, quaternions, rotation_vectors, tangents, vec3

# Rodrigues matrix of the rotation vector (0.1, 0.2, 0.3), computed once with
# scipy.spatial.transform.Rotation.from_rotvec and frozen here.
RODRIGUES_123 = np.array([
    [0.9357548032779188, -0.2831649605650737, 0.21019170595074282],
    [0.30293271340263705, 0.9505806179060914, -0.06803131640494],
    [-0.1805400766943977, 0.12733457491763026, 0.9752903089530457],
])


def test_exp_identity():
    assert_array_equal(mf.quat_exp(np.zeros(3)), [1.0, 0.0, 0.0, 0.0])


def test_exp_half_turn_about_x():
    assert_allclose(mf.quat_exp([math.pi, 0.0, 0.0]), [0.0, 1.0, 0.0, 0.0], atol=1e-16)


def test_exp_matches_rodrigues():
    R = mf.quat_to_rotmat(mf.quat_exp([0.1, 0.2, 0.3]))
    assert np.max(np.abs(R - RODRIGUES_123)) < 1e-12


def test_exp_small_angle_branch_is_continuous():
    v = np.array([3e-9, -2e-9, 1e-9])
    q = mf.quat_exp(v)
    assert_allclose(q[1:], 0.5 * v, rtol=1e-12)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-15


@pytest.mark.parametrize("q, v", [
    ([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
    ([-1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
])
def test_log_fixed_points(q, v):
    assert_allclose(mf.quat_log(np.array(q)), v, atol=0)


def test_log_round_trip_example():
    v = np.array([0.3, -0.1, 0.2])
    assert_allclose(mf.quat_log(mf.quat_exp(v)), v, atol=1e-15)


@given(rotation_vectors())
def test_log_inverts_exp(v):
    assert np.linalg.norm(mf.quat_log(mf.quat_exp(v)) - v) < 1e-10


@given(quaternions(), quaternions())
def test_rotation_homomorphism(a, b):
    lhs = mf.quat_to_rotmat(mf.quat_mul(a, b))
    rhs = mf.quat_to_rotmat(a) @ mf.quat_to_rotmat(b)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_homomorphism_bulk(rng):
    worst = 0.0
    for _ in range(1000):
        a, b = mf.quat_exp(rng.normal(size=3)), mf.quat_exp(rng.normal(size=3))
        worst = max(worst, np.max(np.abs(mf.quat_to_rotmat(mf.quat_mul(a, b)) - mf.quat_to_rotmat(a) @ mf.quat_to_rotmat(b))))
    assert worst < 1e-12


@given(quaternions())
def test_mul_identity_and_inverse(a):
    assert_allclose(mf.quat_mul(a, mf.IDENTITY_QUAT), a, atol=1e-15)
    assert_allclose(mf.quat_mul(a, mf.quat_inv(a)), mf.IDENTITY_QUAT, atol=1e-15)


@given(quaternions(), vec3)
def test_omega_matrix_is_left_pure_product(a, w):
    # Hamilton product [0, w] ⊗ a written out component-wise
    direct = np.concatenate(([-(w @ a[1:])], a[0] * w + np.cross(w, a[1:])))
    assert_allclose(mf.omega_matrix(w) @ a, direct, atol=1e-12)


@given(quaternions())
def test_outputs_are_canonical_unit(q):
    for out in (q, mf.quat_mul(q, q), mf.quat_inv(q), mf.rotmat_to_quat(mf.quat_to_rotmat(q))):
        assert abs(np.linalg.norm(out) - 1.0) < 1e-12
        assert out[0] >= 0.0


def test_rotmat_examples():
    assert_array_equal(mf.quat_to_rotmat(np.array([1.0, 0, 0, 0])), np.eye(3))
    assert_array_equal(mf.quat_to_rotmat(np.array([0.0, 1, 0, 0])), np.diag([1.0, -1.0, -1.0]))


@given(quaternions())
def test_rotmat_orthonormal(q):
    R = mf.quat_to_rotmat(q)
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-10
    assert abs(np.linalg.det(R) - 1.0) < 1e-10


def test_double_cover_maps_to_same_rotation():
    q = mf.quat_exp([0.4, -0.2, 0.9])
    assert_allclose(mf.quat_to_rotmat(-q), mf.quat_to_rotmat(q), atol=0)
    assert_array_equal(mf.canonical(-q), q)


def test_canonical_tie_break_on_zero_scalar():
    assert_array_equal(mf.canonical(np.array([0.0, 0.0, -1.0, 0.0])), [0.0, 0.0, 1.0, 0.0])


def test_skew_examples():
    assert_array_equal(mf.skew(np.zeros(3)), np.zeros((3, 3)))
    assert_array_equal(mf.skew(np.array([1.0, 0, 0])) @ [0.0, 1.0, 0.0], [0.0, 0.0, 1.0])


@given(vec3, vec3)
def test_skew_is_cross_product(v, u):
    S = mf.skew(v)
    assert_allclose(S @ u, np.cross(v, u), atol=1e-12)
    assert_array_equal(S.T, -S)


@given(rotation_vectors(2.5))
def test_right_jacobian_against_finite_differences(v):
    h = 1e-6
    J = mf.right_jacobian(v)
    R = mf.so3_exp(v)
    num = np.column_stack([
        (mf.so3_log(R.T @ mf.so3_exp(v + h * e)) - mf.so3_log(R.T @ mf.so3_exp(v - h * e))) / (2 * h)
        for e in np.eye(3)
    ])
    assert_allclose(J, num, atol=1e-7)
    assert_allclose(mf.right_jacobian_inv(v) @ J, np.eye(3), atol=1e-10)


@given(rotation_vectors(2.5))
def test_left_right_jacobian_relation(v):
    assert_allclose(mf.left_jacobian(v), mf.so3_exp(v) @ mf.right_jacobian(v), atol=1e-12)


@given(imu_states())
def test_boxplus_zero_and_boxminus_self(x):
    assert_allclose(x.boxplus(np.zeros(15)).to_vector(), x.to_vector(), atol=0)
    assert np.max(np.abs(x.boxminus(x))) < 1e-15


@given(imu_states(), tangents())
def test_boxplus_boxminus_round_trip(x, tau):
    assert np.max(np.abs(x.boxplus(tau).boxminus(x) - tau)) < 1e-10


def test_generic_boxplus_on_vectors():
    assert_array_equal(mf.boxplus(np.array([1.0, 2.0]), np.array([0.5, -1.0])), [1.5, 1.0])
    assert_array_equal(mf.boxminus(np.array([1.5, 1.0]), np.array([1.0, 2.0])), [0.5, -1.0])


def test_dimension_mismatch_is_a_contract_violation():
    with pytest.raises(ContractViolation):
        mf.boxplus(np.zeros(3), np.zeros(2))
    with pytest.raises(ContractViolation):
        mf.boxminus(np.zeros(3), ImuState.identity())
    with pytest.raises(ContractViolation):
        ImuState.identity().boxplus(np.zeros(14))


def test_yaw_helpers():
    R = mf.yaw_rotation(0.7) @ mf.so3_exp([0.1, 0.0, 0.0])
    assert math.isclose(mf.yaw_of(R), 0.7, abs_tol=1e-15)
