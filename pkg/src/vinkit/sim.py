"""Deterministic synthetic world: trajectories, landmarks, IMU and feature streams.

IMU samples are synthesized so that the zero-order-hold kinematics used by the
estimators are *exact* for the emitted stream.  For every interval
``[t_i, t_{i+1}]`` the body rate is ``Log(R_i^T R_{i+1}) / dt`` and the specific
force is the constant that carries the analytic velocity ``v_i`` to
``v_{i+1}``.  Rotation and velocity of the ground truth therefore coincide with
the analytic trajectory at every sample, while position is the closed-form
double integral of those constant inputs (it stays within ``O(dt^2)`` of the
analytic curve).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import manifold as mf
from .camera import CameraModel, FORWARD_LOOKING_R_CI, is_visible, observe
from .errors import ContractViolation
from .imu import ImuState, ImuStream, NoiseParams

FAMILIES = ("circle", "sinusoidal-3d", "figure-eight")


def _euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def _body_rate(pitch, roll, dyaw, dpitch, droll) -> np.ndarray:
    sp, cp = math.sin(pitch), math.cos(pitch)
    sr, cr = math.sin(roll), math.cos(roll)
    return np.array(
        [droll - dyaw * sp, dpitch * cr + dyaw * sr * cp, -dpitch * sr + dyaw * cr * cp]
    )


@dataclass(frozen=True)
class AnalyticTrajectory:
    """Closed-form pose, velocity, acceleration and body rate.

    Families
    --------
    ``circle``
        Horizontal circle of ``radius`` at angular ``rate`` with a vertical
        oscillation of ``amplitude`` at twice the rate.
    ``sinusoidal-3d``
        Incommensurate sinusoids of ``amplitude`` on each axis around the
        origin; heading and tilt oscillate.
    ``figure-eight``
        Lemniscate of Gerono of half-width ``radius`` traversed at ``rate``.

    ``attitude`` is ``"yaw_following"`` (heading tracks the velocity, camera looks
    along the path) or ``"fixed"``.
    """

    family: str = "circle"
    radius: float = 5.0
    rate: float = 0.5
    amplitude: float = 0.3
    height: float = 1.0
    attitude: str = "yaw_following"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown trajectory family {self.family!r}")
        if self.attitude not in ("yaw_following", "fixed"):
            raise ContractViolation(f"unknown attitude mode {self.attitude!r}")
        self.self_check()

    # position and its derivatives, stacked as (p, v, a, jerk)
    def _kinematics(self, t: float):
        w, r, A, h = self.rate, self.radius, self.amplitude, self.height
        if self.family == "circle":
            c, s = math.cos(w * t), math.sin(w * t)
            c2, s2 = math.cos(2 * w * t), math.sin(2 * w * t)
            p = np.array([r * c, r * s, h + A * s2])
            v = np.array([-r * w * s, r * w * c, 2 * w * A * c2])
            a = np.array([-r * w * w * c, -r * w * w * s, -4 * w * w * A * s2])
            j = np.array([r * w**3 * s, -r * w**3 * c, -8 * w**3 * A * c2])
        elif self.family == "sinusoidal-3d":
            f = np.array([1.0, 1.3, 0.7]) * w
            ph = np.array([0.0, 0.5, 1.0])
            amp = np.array([A, A, 0.5 * A])
            arg = f * t + ph
            p = amp * np.sin(arg) + np.array([0.0, 0.0, h])
            v = amp * f * np.cos(arg)
            a = -amp * f**2 * np.sin(arg)
            j = -amp * f**3 * np.cos(arg)
        else:
            c, s = math.cos(w * t), math.sin(w * t)
            c2, s2 = math.cos(2 * w * t), math.sin(2 * w * t)
            p = np.array([r * s, 0.5 * r * s2, h + A * s])
            v = np.array([r * w * c, r * w * c2, A * w * c])
            a = np.array([-r * w * w * s, -2 * r * w * w * s2, -A * w * w * s])
            j = np.array([-r * w**3 * c, -4 * r * w**3 * c2, -A * w**3 * c])
        return p, v, a, j

    def _euler(self, t: float):
        """(yaw, pitch, roll) and their rates."""
        if self.attitude == "fixed":
            return (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)
        w = self.rate
        if self.family == "sinusoidal-3d":
            yaw = 0.6 * math.sin(0.5 * w * t)
            pitch = 0.1 * math.sin(0.9 * w * t)
            roll = 0.1 * math.sin(1.1 * w * t + 0.3)
            rates = (
                0.6 * 0.5 * w * math.cos(0.5 * w * t),
                0.1 * 0.9 * w * math.cos(0.9 * w * t),
                0.1 * 1.1 * w * math.cos(1.1 * w * t + 0.3),
            )
            return (yaw, pitch, roll), rates
        _, v, a, _ = self._kinematics(t)
        vx, vy, ax, ay = v[0], v[1], a[0], a[1]
        yaw = math.atan2(vy, vx)
        speed2 = vx * vx + vy * vy
        dyaw = (vx * ay - vy * ax) / speed2 if speed2 > 0.0 else 0.0
        return (yaw, 0.0, 0.0), (dyaw, 0.0, 0.0)

    def position(self, t: float) -> np.ndarray:
        return self._kinematics(t)[0]

    def velocity(self, t: float) -> np.ndarray:
        return self._kinematics(t)[1]

    def acceleration(self, t: float) -> np.ndarray:
        return self._kinematics(t)[2]

    def rotation(self, t: float) -> np.ndarray:
        (yaw, pitch, roll), _ = self._euler(t)
        return _euler_zyx(yaw, pitch, roll)

    def angular_velocity(self, t: float) -> np.ndarray:
        """Body-frame angular rate."""
        (_, pitch, roll), (dyaw, dpitch, droll) = self._euler(t)
        return _body_rate(pitch, roll, dyaw, dpitch, droll)

    def state(self, t: float, bg=None, ba=None) -> ImuState:
        return ImuState(
            self.position(t),
            mf.rotmat_to_quat(self.rotation(t)),
            self.velocity(t),
            np.zeros(3) if bg is None else bg,
            np.zeros(3) if ba is None else ba,
        )

    def self_check(self, tol: float = 1e-8) -> None:
        """Compare analytic derivatives with five-point finite differences."""
        h = 1e-3

        def d5(fn, t):
            return (fn(t - 2 * h) - 8 * fn(t - h) + 8 * fn(t + h) - fn(t + 2 * h)) / (12 * h)

        for t in (0.37, 1.9, 4.2):
            checks = [
                (d5(self.position, t), self.velocity(t)),
                (d5(self.velocity, t), self.acceleration(t)),
            ]
            R = self.rotation(t)
            w_fd = d5(lambda s: mf.so3_log(R.T @ self.rotation(s)), t)
            checks.append((w_fd, self.angular_velocity(t)))
            for fd, an in checks:
                if np.max(np.abs(fd - an)) > tol * max(1.0, float(np.max(np.abs(an)))):
                    raise ContractViolation(
                        f"{self.family}: analytic derivative disagrees with finite differences"
                    )


def true_specific_force(traj: AnalyticTrajectory, t: float, gravity: float = 9.81) -> np.ndarray:
    """Accelerometer reading of a perfect sensor: ``R_IW (a_W + g)``."""
    return traj.rotation(t).T @ (traj.acceleration(t) + np.array([0.0, 0.0, gravity]))


def default_camera(sigma_px: float = 1.0) -> CameraModel:
    return CameraModel(
        fx=320.0, fy=320.0, cx=320.0, cy=240.0, width=640, height=480,
        R_CI=FORWARD_LOOKING_R_CI, t_CI=np.array([0.0, -0.02, 0.05]), sigma_px=sigma_px,
    )


@dataclass
class Scenario:
    trajectory: AnalyticTrajectory = field(default_factory=AnalyticTrajectory)
    camera: CameraModel = field(default_factory=default_camera)
    noise: NoiseParams = field(default_factory=NoiseParams)
    pixel_noise: float = 1.0
    imu_rate: int = 200
    camera_rate: int = 20
    duration: float = 10.0
    seed: int = 0
    n_landmarks: int = 400
    shell: tuple[float, float] = (2.0, 6.0)
    max_range: float = 25.0
    initial_bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    initial_ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quantize_pixels: bool = False

    def __post_init__(self):
        if self.imu_rate < self.camera_rate or self.imu_rate % self.camera_rate:
            raise ContractViolation("IMU rate must be an integer multiple of the camera rate")
        if (10**9) % self.imu_rate:
            raise ContractViolation("IMU rate must divide 1e9 so timestamps are exact in ns")
        if self.duration <= 0:
            raise ContractViolation("duration must be positive")

    @property
    def imu_period_ns(self) -> int:
        return 10**9 // self.imu_rate

    @property
    def zero_noise(self) -> bool:
        n = self.noise
        return (
            self.pixel_noise == 0.0
            and n.sigma_g == n.sigma_a == n.sigma_bg == n.sigma_ba == 0.0
        )


@dataclass
class SimData:
    scenario: Scenario
    timestamps_ns: np.ndarray
    imu: ImuStream
    truth: list[ImuState]
    frame_sample_index: np.ndarray
    features: list[list[tuple[int, np.ndarray]]]
    landmarks: dict[int, np.ndarray]

    @property
    def frame_times(self) -> np.ndarray:
        return self.imu.t[self.frame_sample_index]


def _gamma_integrals(phi: np.ndarray):
    """``(1/dt)∫Exp(ws)ds`` and ``(1/dt^2)∫∫Exp(ws)ds dτ`` for ``phi = w dt``."""
    K = mf.skew(phi)
    K2 = K @ K
    th2 = float(phi @ phi)
    if th2 < 1e-8:
        g1 = np.eye(3) + 0.5 * K + K2 / 6.0 - th2 * K / 24.0
        g2 = 0.5 * np.eye(3) + K / 6.0 + K2 / 24.0 - th2 * K / 120.0
        return g1, g2
    th = math.sqrt(th2)
    s, c = math.sin(th), math.cos(th)
    g1 = np.eye(3) + ((1 - c) / th2) * K + ((th - s) / (th2 * th)) * K2
    g2 = 0.5 * np.eye(3) + ((th - s) / (th2 * th)) * K + ((0.5 * th2 + c - 1) / (th2 * th2)) * K2
    return g1, g2


def _sample_landmarks(sc: Scenario, rng: np.random.Generator) -> dict[int, np.ndarray]:
    traj = sc.trajectory
    out: dict[int, np.ndarray] = {}
    lo, hi = sc.shell
    for j in range(sc.n_landmarks):
        t = rng.uniform(0.0, sc.duration)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        r = (lo**3 + rng.uniform() * (hi**3 - lo**3)) ** (1.0 / 3.0)
        out[j] = traj.position(t) + r * d
    return out


def _candidates(state: ImuState, pts: np.ndarray, cam: CameraModel, max_range: float) -> np.ndarray:
    """Cheap vectorized visibility pre-filter; the exact test runs afterwards."""
    rel = pts - state.t
    in_range = np.einsum("ij,ij->i", rel, rel) <= max_range * max_range
    pc = rel @ (cam.R_CI @ state.R.T).T + cam.t_CI
    z = pc[:, 2]
    front = z > 1e-3
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    mu, mv = 0.25 * cam.width, 0.25 * cam.height
    inside = (u > -mu) & (u < cam.width + mu) & (v > -mv) & (v < cam.height + mv)
    return in_range & front & inside


def generate(sc: Scenario) -> SimData:
    """Produce IMU and feature streams plus ground truth for a scenario."""
    ss = np.random.SeedSequence(sc.seed)
    rng_lm, rng_bias, rng_imu, rng_px = (np.random.default_rng(s) for s in ss.spawn(4))
    traj = sc.trajectory
    noise = sc.noise
    gvec = noise.gravity_vector

    period = sc.imu_period_ns
    n = int(round(sc.duration * sc.imu_rate))
    ts_ns = np.arange(n + 1, dtype=np.int64) * period
    t = ts_ns.astype(float) * 1e-9
    dt = period * 1e-9

    Rs = [traj.rotation(ti) for ti in t]
    vs = [traj.velocity(ti) for ti in t]
    bg = np.array(sc.initial_bg, dtype=float)
    ba = np.array(sc.initial_ba, dtype=float)
    sg, sa = noise.discrete_std(dt)

    p = traj.position(0.0)
    truth: list[ImuState] = []
    gyro = np.zeros((n + 1, 3))
    accel = np.zeros((n + 1, 3))
    for i in range(n + 1):
        truth.append(ImuState(p, mf.rotmat_to_quat(Rs[i]), vs[i], bg, ba))
        if i < n:
            w = mf.so3_log(Rs[i].T @ Rs[i + 1]) / dt
            g1, g2 = _gamma_integrals(w * dt)
            f = np.linalg.solve(Rs[i] @ g1 * dt, vs[i + 1] - vs[i] + gvec * dt)
            p = p + vs[i] * dt - 0.5 * dt * dt * gvec + Rs[i] @ g2 @ f * (dt * dt)
        else:
            w = traj.angular_velocity(t[i])
            f = true_specific_force(traj, t[i], noise.gravity)
        gyro[i] = w + bg
        accel[i] = f + ba
        if sg > 0.0:
            gyro[i] += sg * rng_imu.standard_normal(3)
        if sa > 0.0:
            accel[i] += sa * rng_imu.standard_normal(3)
        if i < n:
            if noise.sigma_bg > 0.0:
                bg = bg + noise.sigma_bg * math.sqrt(dt) * rng_bias.standard_normal(3)
            if noise.sigma_ba > 0.0:
                ba = ba + noise.sigma_ba * math.sqrt(dt) * rng_bias.standard_normal(3)

    landmarks = _sample_landmarks(sc, rng_lm)
    step = sc.imu_rate // sc.camera_rate
    frame_idx = np.arange(0, n + 1, step)
    cam = sc.camera
    lm_ids = np.array(sorted(landmarks))
    lm_arr = np.array([landmarks[j] for j in lm_ids]).reshape(-1, 3)
    features: list[list[tuple[int, np.ndarray]]] = []
    for k in frame_idx:
        state = truth[k]
        obs = []
        for j in lm_ids[_candidates(state, lm_arr, cam, sc.max_range)]:
            L = landmarks[int(j)]
            if not is_visible(state, L, cam, distorted=True):
                continue
            px = observe(state, L, cam, distorted=True)
            if sc.pixel_noise > 0.0:
                px = px + sc.pixel_noise * rng_px.standard_normal(2)
            if sc.quantize_pixels:
                px = np.round(px)
            obs.append((int(j), px))
        features.append(obs)

    return SimData(
        scenario=sc,
        timestamps_ns=ts_ns,
        imu=ImuStream(t, gyro, accel),
        truth=truth,
        frame_sample_index=frame_idx,
        features=features,
        landmarks=landmarks,
    )
