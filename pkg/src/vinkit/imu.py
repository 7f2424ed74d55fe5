"""IMU kinematics: measurement model, propagation, preintegration, covariance.

Conventions
-----------
* Error state order is ``(dt, dtheta, dv, dbg, dba)`` (15-dim); rotation errors
  are right perturbations, ``q_true = q ⊗ Exp(dtheta)``.
* ``gravity`` below is the vector ``(0, 0, g)`` with ``g > 0``.  The
  accelerometer reads specific force ``R_IW (a_W + gravity) + b_a + n_a`` so a
  sensor at rest reads ``+g`` on its z axis, and propagation subtracts
  ``gravity * dt`` from the velocity.
* Samples are zero-order held: sample ``i`` drives ``[t_i, t_{i+1})``.  The
  last sample of a stream only marks the end time of the interval.
* Noise parameters are continuous-time densities.  A sample taken every
  ``dt`` seconds carries white noise with std ``sigma / sqrt(dt)``; bias random
  walks grow by ``sigma_b * sqrt(dt)`` per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import manifold as mf
from .errors import ContractViolation

INTEGRATORS = ("euler", "midpoint", "rk4")
BIAS_RELINEARIZE_THRESHOLD = 0.05


@dataclass(frozen=True)
class ImuState:
    """Nominal IMU state ``(t_WI, q_WI, v_WI, b_g, b_a)``."""

    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))

    tangent_dim = 15

    def __post_init__(self):
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "q", mf.canonical(np.array(self.q, dtype=float).reshape(4)))
        object.__setattr__(self, "v", np.array(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "bg", np.array(self.bg, dtype=float).reshape(3))
        object.__setattr__(self, "ba", np.array(self.ba, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "ImuState":
        return cls(np.zeros(3), mf.IDENTITY_QUAT, np.zeros(3))

    @property
    def R(self) -> np.ndarray:
        """Rotation ``R_WI`` (IMU to world)."""
        return mf.quat_to_rotmat(self.q)

    def boxplus(self, delta: np.ndarray) -> "ImuState":
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (15,):
            raise ContractViolation(f"ImuState boxplus expects a 15-vector, got {delta.shape}")
        return ImuState._trusted(
            self.t + delta[0:3],
            mf.quat_boxplus(self.q, delta[3:6]),
            self.v + delta[6:9],
            self.bg + delta[9:12],
            self.ba + delta[12:15],
        )

    @classmethod
    def _trusted(cls, t, q, v, bg, ba) -> "ImuState":
        # fields are already fresh float arrays and q is canonical; skip the copies
        out = object.__new__(cls)
        for name, val in (("t", t), ("q", q), ("v", v), ("bg", bg), ("ba", ba)):
            object.__setattr__(out, name, val)
        return out

    def boxminus(self, other: "ImuState") -> np.ndarray:
        """``self ⊖ other``."""
        return np.concatenate(
            [
                self.t - other.t,
                mf.quat_boxminus(self.q, other.q),
                self.v - other.v,
                self.bg - other.bg,
                self.ba - other.ba,
            ]
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.q, self.v, self.bg, self.ba])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "ImuState":
        x = np.asarray(x, dtype=float)
        if x.shape != (16,):
            raise ContractViolation(f"ImuState vector must have 16 entries, got {x.shape}")
        return cls(x[0:3], x[3:7], x[7:10], x[10:13], x[13:16])

    def replace(self, **kw) -> "ImuState":
        d = dict(t=self.t, q=self.q, v=self.v, bg=self.bg, ba=self.ba)
        d.update(kw)
        return ImuState(**d)


def boxminus_jacobian(err: np.ndarray) -> np.ndarray:
    """d(x ⊕ eps ⊖ x0)/d(eps) at eps=0, where ``err = x ⊖ x0``."""
    J = np.eye(15)
    J[3:6, 3:6] = mf.right_jacobian_inv(err[3:6])
    return J


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class ImuStream:
    """Column storage for a run of IMU samples."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.gyro) == len(self.accel)):
            raise ContractViolation("IMU stream columns have different lengths")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i) -> ImuSample:
        return ImuSample(float(self.t[i]), self.gyro[i].copy(), self.accel[i].copy())

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuStream":
        if len(samples) == 0:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            np.array([s.timestamp for s in samples]),
            np.array([s.gyro for s in samples]),
            np.array([s.accel for s in samples]),
        )

    def between(self, t0: float, t1: float, tol: float = 1e-9) -> "ImuStream":
        """Samples with ``t0 <= t <= t1`` (endpoints included, with tolerance)."""
        i0 = int(np.searchsorted(self.t, t0 - tol, side="left"))
        i1 = int(np.searchsorted(self.t, t1 + tol, side="right"))
        return ImuStream(self.t[i0:i1], self.gyro[i0:i1], self.accel[i0:i1])

    def concat(self, other: "ImuStream") -> "ImuStream":
        """Join two streams that share their boundary sample."""
        if len(self) and len(other) and abs(self.t[-1] - other.t[0]) < 1e-9:
            other = ImuStream(other.t[1:], other.gyro[1:], other.accel[1:])
        return ImuStream(
            np.concatenate([self.t, other.t]),
            np.vstack([self.gyro, other.gyro]),
            np.vstack([self.accel, other.accel]),
        )


def as_stream(samples) -> ImuStream:
    stream = samples if isinstance(samples, ImuStream) else ImuStream.from_samples(list(samples))
    if len(stream) == 0:
        raise ContractViolation("at least one IMU sample is required")
    if np.any(np.diff(stream.t) <= 0.0):
        raise ContractViolation("IMU timestamps must be strictly increasing")
    return stream


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities and gravity magnitude."""

    sigma_g: float = 1e-3
    sigma_a: float = 1e-2
    sigma_bg: float = 1e-5
    sigma_ba: float = 1e-4
    gravity: float = 9.81

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if getattr(self, name) < 0.0:
                raise ContractViolation(f"{name} must be non-negative")

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.gravity])

    def Q(self) -> np.ndarray:
        """12x12 continuous noise covariance for ``(n_g, n_a, n_bg, n_ba)``."""
        return np.diag(
            np.repeat([self.sigma_g**2, self.sigma_a**2, self.sigma_bg**2, self.sigma_ba**2], 3)
        )

    def discrete_std(self, dt: float) -> tuple[float, float]:
        """Per-sample gyro/accel white-noise std for sample period ``dt``."""
        return self.sigma_g / math.sqrt(dt), self.sigma_a / math.sqrt(dt)


def measure(
    state: ImuState,
    omega: np.ndarray,
    accel_world: np.ndarray,
    noise: NoiseParams,
    rng: np.random.Generator | None = None,
    dt: float = 0.005,
    timestamp: float = 0.0,
) -> ImuSample:
    """Synthesize one IMU reading from true body rate and world acceleration."""
    gyro = np.asarray(omega, dtype=float) + state.bg
    accel = state.R.T @ (np.asarray(accel_world, dtype=float) + noise.gravity_vector) + state.ba
    if rng is not None:
        sg, sa = noise.discrete_std(dt)
        gyro = gyro + sg * rng.standard_normal(3)
        accel = accel + sa * rng.standard_normal(3)
    return ImuSample(timestamp, gyro, accel)


def _increments(w: np.ndarray, a: np.ndarray, dt: float, method: str, derivs: bool = False):
    """Body-frame increments over one zero-order-hold interval.

    Returns ``(dq, dv, dp)`` with ``dv ≈ ∫ Exp(w s) a ds`` and
    ``dp ≈ ∫∫ Exp(w s) a ds dτ`` over ``[0, dt]``; with ``derivs`` also the
    derivatives of ``dv``/``dp`` with respect to ``a`` and ``w``.
    """
    dq = mf.quat_exp(w * dt)
    if method == "euler":
        dv = a * dt
        dp = 0.5 * dt * dt * a
        if not derivs:
            return dq, dv, dp
        z = np.zeros((3, 3))
        return dq, dv, dp, dt * np.eye(3), z, 0.5 * dt * dt * np.eye(3), z
    if method == "midpoint":
        Em = mf.so3_exp(0.5 * dt * w)
        am = Em @ a
        dv = dt * am
        dp = 0.5 * dt * dt * am
        if not derivs:
            return dq, dv, dp
        d_am_w = -Em @ mf.skew(a) @ mf.right_jacobian(0.5 * dt * w) * (0.5 * dt)
        return dq, dv, dp, dt * Em, dt * d_am_w, 0.5 * dt * dt * Em, 0.5 * dt * dt * d_am_w
    if method == "rk4":
        Em = mf.so3_exp(0.5 * dt * w)
        E1 = mf.quat_to_rotmat(dq)
        am = Em @ a
        a1 = E1 @ a
        dv = (dt / 6.0) * (a + 4.0 * am + a1)
        dp = (dt * dt / 6.0) * (a + 2.0 * am)
        if not derivs:
            return dq, dv, dp
        ska = mf.skew(a)
        d_am_w = -Em @ ska @ mf.right_jacobian(0.5 * dt * w) * (0.5 * dt)
        d_a1_w = -E1 @ ska @ mf.right_jacobian(dt * w) * dt
        I3 = np.eye(3)
        return (
            dq,
            dv,
            dp,
            (dt / 6.0) * (I3 + 4.0 * Em + E1),
            (dt / 6.0) * (4.0 * d_am_w + d_a1_w),
            (dt * dt / 6.0) * (I3 + 2.0 * Em),
            (dt * dt / 6.0) * (2.0 * d_am_w),
        )
    raise ContractViolation(f"unknown integrator {method!r}; expected one of {INTEGRATORS}")


def propagate_step(
    state: ImuState, gyro: np.ndarray, accel: np.ndarray, dt: float, gravity: np.ndarray, method: str
) -> ImuState:
    """One noise-free discrete step of the nominal dynamics."""
    w = gyro - state.bg
    a = accel - state.ba
    dq, dv, dp = _increments(w, a, dt, method)
    R = state.R
    t = state.t + state.v * dt - 0.5 * dt * dt * gravity + R @ dp
    v = state.v - gravity * dt + R @ dv
    return ImuState(t, mf.quat_mul(state.q, dq), v, state.bg, state.ba)


def propagate(state: ImuState, samples, noise: NoiseParams, integrator: str = "rk4") -> ImuState:
    """Noise-free propagation of ``state`` across the sample stream.

    ``state`` is at the time of the first sample; the result is at the time of
    the last sample.  Biases are unchanged.
    """
    stream = as_stream(samples)
    g = noise.gravity_vector
    dts = np.diff(stream.t)
    for i, dt in enumerate(dts):
        state = propagate_step(state, stream.gyro[i], stream.accel[i], float(dt), g, integrator)
    return state


def propagate_trajectory(state: ImuState, samples, noise: NoiseParams, integrator: str = "rk4"):
    """Like :func:`propagate` but returns the state at every sample time."""
    stream = as_stream(samples)
    g = noise.gravity_vector
    out = [state]
    for i, dt in enumerate(np.diff(stream.t)):
        state = propagate_step(state, stream.gyro[i], stream.accel[i], float(dt), g, integrator)
        out.append(state)
    return out


@dataclass
class PreintegratedImu:
    """Preintegrated deltas over ``[t_i, t_j]`` expressed in the start frame.

    ``cov`` is the 15x15 covariance of ``(dalpha, dtheta_gamma, dbeta, dbg, dba)``
    where the bias block is the random-walk drift ``b_j - b_i``.  ``bias_jac``
    is the 9x6 Jacobian of ``(alpha, theta_gamma, beta)`` with respect to
    ``(b_g, b_a)`` at the linearization biases.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    dt: float
    cov: np.ndarray
    bias_g: np.ndarray
    bias_a: np.ndarray
    bias_jac: np.ndarray
    samples: ImuStream | None = None
    noise: NoiseParams | None = None
    integrator: str = "rk4"

    @property
    def cov9(self) -> np.ndarray:
        """Covariance of ``(dalpha, dtheta_gamma, dbeta)`` for fixed-bias use."""
        return self.cov[:9, :9]

    @property
    def dalpha_dbg(self):
        return self.bias_jac[0:3, 0:3]

    @property
    def dalpha_dba(self):
        return self.bias_jac[0:3, 3:6]

    @property
    def dgamma_dbg(self):
        return self.bias_jac[3:6, 0:3]

    @property
    def dbeta_dbg(self):
        return self.bias_jac[6:9, 0:3]

    @property
    def dbeta_dba(self):
        return self.bias_jac[6:9, 3:6]

    def corrected(self, bg: np.ndarray, ba: np.ndarray):
        """First-order bias-corrected ``(alpha, beta, gamma)`` (no re-preintegration)."""
        dbg = np.asarray(bg, dtype=float) - self.bias_g
        dba = np.asarray(ba, dtype=float) - self.bias_a
        alpha = self.alpha + self.dalpha_dbg @ dbg + self.dalpha_dba @ dba
        beta = self.beta + self.dbeta_dbg @ dbg + self.dbeta_dba @ dba
        gamma = mf.quat_mul(self.gamma, mf.quat_exp(self.dgamma_dbg @ dbg))
        return alpha, beta, gamma


def preintegrate(
    samples,
    bias: tuple[np.ndarray, np.ndarray],
    noise: NoiseParams,
    integrator: str = "rk4",
) -> PreintegratedImu:
    """Integrate the sample stream into ``(alpha, beta, gamma)`` from zero initial conditions."""
    stream = as_stream(samples)
    bg = np.asarray(bias[0], dtype=float).reshape(3)
    ba = np.asarray(bias[1], dtype=float).reshape(3)
    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = mf.IDENTITY_QUAT.copy()
    P = np.zeros((15, 15))
    Phi = np.eye(15)
    A = np.eye(15)
    B = np.zeros((15, 12))
    B[9:15, 6:12] = np.eye(6)
    qvec = np.array([noise.sigma_g**2, noise.sigma_a**2, noise.sigma_bg**2, noise.sigma_ba**2])
    for i, dt in enumerate(np.diff(stream.t)):
        dt = float(dt)
        w = stream.gyro[i] - bg
        a = stream.accel[i] - ba
        dq, dv, dp, Dv_a, Dv_w, Dp_a, Dp_w = _increments(w, a, dt, integrator, derivs=True)
        R = mf.quat_to_rotmat(gamma)
        E1 = mf.quat_to_rotmat(dq)

        A[0:3, 3:6] = -R @ mf.skew(dp)
        A[0:3, 6:9] = dt * np.eye(3)
        A[0:3, 9:12] = -R @ Dp_w
        A[0:3, 12:15] = -R @ Dp_a
        A[3:6, 3:6] = E1.T
        A[3:6, 9:12] = -mf.right_jacobian(w * dt) * dt
        A[6:9, 3:6] = -R @ mf.skew(dv)
        A[6:9, 9:12] = -R @ Dv_w
        A[6:9, 12:15] = -R @ Dv_a
        # measurement noise enters exactly like a bias perturbation
        B[:, 0:3] = A[:, 9:12]
        B[:, 3:6] = A[:, 12:15]
        B[9:15, 0:6] = 0.0
        Qd = np.repeat(qvec * np.array([1.0 / dt, 1.0 / dt, dt, dt]), 3)

        P = A @ P @ A.T + (B * Qd) @ B.T
        Phi = A @ Phi

        alpha = alpha + beta * dt + R @ dp
        beta = beta + R @ dv
        gamma = mf.quat_mul(gamma, dq)

    P = 0.5 * (P + P.T)
    return PreintegratedImu(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        dt=float(stream.t[-1] - stream.t[0]),
        cov=P,
        bias_g=bg,
        bias_a=ba,
        bias_jac=Phi[0:9, 9:15].copy(),
        samples=stream,
        noise=noise,
        integrator=integrator,
    )


def bias_correct(
    p: PreintegratedImu,
    new_bias: tuple[np.ndarray, np.ndarray],
    threshold: float = BIAS_RELINEARIZE_THRESHOLD,
) -> PreintegratedImu:
    """Move the bias linearization point to ``new_bias``.

    Small changes use the first-order bias Jacobians; if any component moves by
    more than ``threshold`` the stored samples are re-preintegrated.
    """
    bg = np.asarray(new_bias[0], dtype=float).reshape(3)
    ba = np.asarray(new_bias[1], dtype=float).reshape(3)
    delta = np.concatenate([bg - p.bias_g, ba - p.bias_a])
    if np.max(np.abs(delta), initial=0.0) > threshold and p.samples is not None:
        return preintegrate(p.samples, (bg, ba), p.noise, p.integrator)
    alpha, beta, gamma = p.corrected(bg, ba)
    return PreintegratedImu(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        dt=p.dt,
        cov=p.cov,
        bias_g=bg,
        bias_a=ba,
        bias_jac=p.bias_jac,
        samples=p.samples,
        noise=p.noise,
        integrator=p.integrator,
    )


def predict_with_preintegration(state: ImuState, p: PreintegratedImu, gravity: np.ndarray) -> ImuState:
    """Compose ``state`` with the deltas (position, velocity, rotation); biases kept."""
    alpha, beta, gamma = p.corrected(state.bg, state.ba)
    R = state.R
    T = p.dt
    t = state.t + state.v * T - 0.5 * T * T * gravity + R @ alpha
    v = state.v - gravity * T + R @ beta
    return ImuState(t, mf.quat_mul(state.q, gamma), v, state.bg, state.ba)


def error_jacobians(state: ImuState, sample: ImuSample) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time error-state Jacobians ``F`` (15x15) and ``G`` (15x12).

    Noise ordering for ``G`` is ``(n_g, n_a, n_bg, n_ba)``.
    """
    w = np.asarray(sample.gyro) - state.bg
    a = np.asarray(sample.accel) - state.ba
    R = state.R
    F = np.zeros((15, 15))
    F[0:3, 6:9] = np.eye(3)
    F[3:6, 3:6] = -mf.skew(w)
    F[3:6, 9:12] = -np.eye(3)
    F[6:9, 3:6] = -R @ mf.skew(a)
    F[6:9, 12:15] = -R
    G = np.zeros((15, 12))
    G[3:6, 0:3] = -np.eye(3)
    G[6:9, 3:6] = -R
    G[9:15, 6:12] = np.eye(6)
    return F, G


def _series_expm(M: np.ndarray, order: int) -> np.ndarray:
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, order + 1):
        term = term @ M / k
        out = out + term
    return out


def discretize(F: np.ndarray, G: np.ndarray, Q: np.ndarray, dt: float, order: int = 4):
    """Transition matrix and discrete process noise over ``dt``.

    ``Phi`` is the Taylor series of ``expm(F dt)`` truncated at ``order``;
    ``Q_k = ∫ Phi(s) G Q G^T Phi(s)^T ds`` uses the trapezoidal rule with
    ``order`` panels, each ``Phi(s)`` truncated at the same order.
    """
    if not dt > 0.0:
        raise ContractViolation(f"discretization interval must be positive, got {dt}")
    if order < 1:
        raise ContractViolation("series order must be a positive integer")
    Phi = _series_expm(F * dt, order)
    GQG = G @ Q @ G.T
    h = dt / order
    Qk = np.zeros_like(GQG)
    for k in range(order + 1):
        s = k * h
        Ps = Phi if k == order else _series_expm(F * s, order)
        wgt = 0.5 if k in (0, order) else 1.0
        Qk += wgt * (Ps @ GQG @ Ps.T)
    Qk *= h
    return Phi, 0.5 * (Qk + Qk.T)


def check_psd(P: np.ndarray, name: str = "covariance", tol: float = 1e-9) -> None:
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ContractViolation(f"{name} must be square, got {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ContractViolation(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(P)))) if P.size else 1.0
    if not np.allclose(P, P.T, atol=tol * scale, rtol=0.0):
        raise ContractViolation(f"{name} is not symmetric")
    if P.size and np.linalg.eigvalsh(0.5 * (P + P.T))[0] < -tol * scale:
        raise ContractViolation(f"{name} is not positive semidefinite")


def propagate_covariance(P: np.ndarray, Phi: np.ndarray, Qk: np.ndarray) -> np.ndarray:
    check_psd(P)
    out = Phi @ P @ Phi.T + Qk
    return 0.5 * (out + out.T)


def continuous_error_rate(
    nominal: ImuState, delta: np.ndarray, sample: ImuSample, gravity: np.ndarray, w_noise=None
) -> np.ndarray:
    """Exact time derivative of ``(nominal ⊕ delta) ⊖ nominal`` under the nonlinear dynamics.

    Both trajectories share the measured input; ``w_noise`` (12-vector) perturbs
    only the true one.  Used as the finite-difference reference for ``F``/``G``.
    """
    w_noise = np.zeros(12) if w_noise is None else np.asarray(w_noise, dtype=float)
    true = nominal.boxplus(delta)
    wn = np.asarray(sample.gyro) - nominal.bg
    an = np.asarray(sample.accel) - nominal.ba
    wt = np.asarray(sample.gyro) - true.bg - w_noise[0:3]
    at = np.asarray(sample.accel) - true.ba - w_noise[3:6]
    dth = delta[3:6]
    rate = np.zeros(15)
    rate[0:3] = true.v - nominal.v
    rate[3:6] = mf.right_jacobian_inv(dth) @ (wt - mf.so3_exp(-dth) @ wn)
    rate[6:9] = (true.R @ at - gravity) - (nominal.R @ an - gravity)
    rate[9:12] = w_noise[6:9]
    rate[12:15] = w_noise[9:12]
    return rate
