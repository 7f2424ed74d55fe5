"""Quick invariant checks run by ``vinkit selftest``.

Every check is small (well under a second or two) and self-contained: it
builds its own random inputs from a fixed seed and compares a module against
an independent reference (finite differences, brute-force linear algebra,
or the simulator's ground truth).
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import camera as cam
from . import ekf, io, metrics, sim
from . import manifold as mf
from .imu import ImuSample, ImuState, ImuStream, NoiseParams, error_jacobians, continuous_error_rate
from .imu import predict_with_preintegration, preintegrate, propagate
from .smoother import FactorGraph, LinearFactor, marginal_covariance, marginalize


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.value:.3e} (limit {self.threshold:.1e}, {self.seconds:.2f} s)"


def random_state(rng: np.random.Generator) -> ImuState:
    return ImuState(
        rng.normal(size=3),
        mf.quat_exp(rng.normal(size=3)),
        rng.normal(size=3),
        0.01 * rng.normal(size=3),
        0.1 * rng.normal(size=3),
    )


def random_stream(rng: np.random.Generator, n: int = 200, rate: float = 200.0) -> ImuStream:
    t = np.arange(n + 1) / rate
    gyro = 0.5 * rng.normal(size=(n + 1, 3))
    accel = np.array([0.0, 0.0, 9.81]) + rng.normal(size=(n + 1, 3))
    return ImuStream(t, gyro, accel)


def check_manifold(rng) -> float:
    err = 0.0
    for _ in range(50):
        axis = rng.normal(size=3)
        v = axis / np.linalg.norm(axis) * rng.uniform(0.0, 3.0)  # log is unique below pi
        err = max(err, np.linalg.norm(mf.quat_log(mf.quat_exp(v)) - v))
        R = mf.so3_exp(v)
        err = max(err, np.linalg.norm(mf.quat_to_rotmat(mf.rotmat_to_quat(R)) - R))
        err = max(err, np.linalg.norm(R.T @ R - np.eye(3)))
    return err


def check_preintegration(rng) -> float:
    noise = NoiseParams()
    err = 0.0
    for _ in range(5):
        x0 = random_state(rng)
        s = random_stream(rng)
        direct = propagate(x0, s, noise)
        p = preintegrate(s, (x0.bg, x0.ba), noise)
        pred = predict_with_preintegration(x0, p, noise.gravity_vector)
        err = max(err, np.max(np.abs(pred.boxminus(direct))))
    return err


def check_error_jacobians(rng) -> float:
    """F and G against central differences of the exact error rate."""
    worst = 0.0
    g = np.array([0.0, 0.0, 9.81])
    h = 1e-6
    for _ in range(10):
        x = random_state(rng)
        sample = ImuSample(0.0, rng.normal(size=3), rng.normal(size=3))
        F, G = error_jacobians(x, sample)
        Fn = np.zeros((15, 15))
        Gn = np.zeros((15, 12))
        for k in range(15):
            e = np.zeros(15)
            e[k] = h
            Fn[:, k] = (continuous_error_rate(x, e, sample, g) - continuous_error_rate(x, -e, sample, g)) / (2 * h)
        for k in range(12):
            n = np.zeros(12)
            n[k] = h
            z = np.zeros(15)
            Gn[:, k] = (continuous_error_rate(x, z, sample, g, n) - continuous_error_rate(x, z, sample, g, -n)) / (2 * h)
        worst = max(worst, np.linalg.norm(F - Fn) / max(1.0, np.linalg.norm(F)))
        worst = max(worst, np.linalg.norm(G - Gn) / max(1.0, np.linalg.norm(G)))
    return worst


def check_camera_jacobian(rng) -> float:
    model = sim.default_camera()
    worst = 0.0
    h = 1e-6
    for _ in range(10):
        x = random_state(rng)
        L_C = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 6)])
        L = cam.inverse_transform(x, L_C, model)
        _, Jx, JL = cam.observe_jacobians(x, L, model)
        Jn = np.zeros((2, 15))
        for k in range(15):
            e = np.zeros(15)
            e[k] = h
            Jn[:, k] = (cam.observe(x.boxplus(e), L, model) - cam.observe(x.boxplus(-e), L, model)) / (2 * h)
        JLn = np.column_stack([
            (cam.observe(x, L + h * d, model) - cam.observe(x, L - h * d, model)) / (2 * h) for d in np.eye(3)
        ])
        worst = max(worst, np.linalg.norm(Jx - Jn) / np.linalg.norm(Jx), np.linalg.norm(JL - JLn) / np.linalg.norm(JL))
    return worst


def check_geometric_metrics(rng) -> float:
    model = sim.default_camera()
    worst = 0.0
    for _ in range(10):
        x = random_state(rng)
        L = cam.inverse_transform(x, np.array([0.3, -0.2, 4.0]) + 0.1 * rng.normal(size=3), model)
        z = cam.observe(x, L, model)
        for m in cam.METRICS:
            worst = max(worst, float(np.max(np.abs(cam.geometric_residual(m, z, x, L, model)))))
    return worst


def check_simulator(rng) -> float:
    sc = sim.Scenario(duration=1.0, noise=NoiseParams(0, 0, 0, 0), pixel_noise=0.0, n_landmarks=20)
    data = sim.generate(sc)
    est = propagate(data.truth[0], data.imu, sc.noise)
    return float(np.linalg.norm(est.t - data.truth[-1].t))


def check_alignment(rng) -> float:
    n = 30
    t = np.arange(n, dtype=float)
    gt_p = rng.normal(size=(n, 3))
    gt_q = np.array([mf.quat_exp(rng.normal(size=3)) for _ in range(n)])
    R = mf.so3_exp(rng.normal(size=3))
    off = rng.normal(size=3)
    est_p = gt_p @ R.T + off
    est_q = np.array([mf.quat_mul(mf.rotmat_to_quat(R), q) for q in gt_q])
    pair = metrics.TrajectoryPair(t, est_p, est_q, gt_p, gt_q)
    aligned, _, _ = metrics.align(pair, "se3")
    return metrics.ate(aligned)


def check_iekf_optimality(rng) -> float:
    """The iterated update converges to a stationary point of the MAP cost."""
    model = sim.default_camera()
    x = random_state(rng)
    L = cam.inverse_transform(x, np.array([0.2, -0.1, 3.0]), model)
    P = np.diag(np.concatenate([np.full(15, 1e-2), np.full(3, 1e-1)]))
    fs = ekf.FilterState(x, {7: L}, P, 0.0)
    z = cam.observe(x, L, model) + rng.normal(size=2)
    obs = [cam.FeatureObservation(0, 7, z, 1.0)]
    post, _ = ekf.filter_update(fs, obs, model, 1.0, gate=None, iterated=True, tol=1e-13)

    def cost(s: ekf.FilterState) -> float:
        e = s.boxminus(fs)
        r = z - cam.observe(s.imu, s.landmarks[7], model)
        return float(e @ np.linalg.solve(P, e) + r @ r)

    h = 1e-6
    grad = np.array([(cost(post.boxplus(h * d)) - cost(post.boxplus(-h * d))) / (2 * h) for d in np.eye(18)])
    return float(np.linalg.norm(grad))


def check_marginalization(rng) -> float:
    """Schur-complement marginal of a linear graph equals the dense inverse."""
    dims = {k: 3 for k in range(5)}
    g = FactorGraph()
    for k in dims:
        g.add_variable(k, np.zeros(3))
    for k in dims:
        g.add_factor(LinearFactor([k], [np.eye(3) + 0.1 * rng.normal(size=(3, 3))], rng.normal(size=3)))
    for k in range(4):
        g.add_factor(LinearFactor([k, k + 1], [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))], rng.normal(size=3)))
    A = np.zeros((0, 15))
    for f in g.factors:
        row = np.zeros((3, 15))
        for key, Ak in zip(f.keys, f.A):
            row[:, 3 * key : 3 * key + 3] = Ak
        A = np.vstack([A, row])
    dense = np.linalg.inv(A.T @ A)
    reduced = marginalize(g, [0, 1])
    return float(np.max(np.abs(marginal_covariance(reduced, 4) - dense[12:15, 12:15])))


def check_io_roundtrip(rng) -> float:
    states = [random_state(rng) for _ in range(5)]
    ts = np.arange(5, dtype=np.int64) * 50_000_000
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "trajectory.csv"
        io.write_trajectory_csv(path, ts, states)
        ts2, back, _ = io.read_trajectory_csv(path)
    diff = max(float(np.max(np.abs(a.to_vector() - b.to_vector()))) for a, b in zip(states, back))
    return diff + float(np.any(ts2 != ts))


CHECKS: list[tuple[str, Callable, float]] = [
    ("manifold exp/log and rotation round trips", check_manifold, 1e-12),
    ("preintegration matches direct propagation", check_preintegration, 1e-9),
    ("error-state F/G vs finite differences", check_error_jacobians, 1e-5),
    ("camera Jacobian vs finite differences", check_camera_jacobian, 1e-5),
    ("geometric residuals vanish on exact data", check_geometric_metrics, 1e-12),
    ("zero-noise simulator is self-consistent", check_simulator, 1e-6),
    ("se3 alignment removes a rigid transform", check_alignment, 1e-10),
    ("iterated update is MAP-stationary", check_iekf_optimality, 1e-4),
    ("fixed-lag marginal equals dense marginal", check_marginalization, 1e-10),
    ("trajectory CSV round trip is exact", check_io_roundtrip, 0.0),
]


def run_all(seed: int = 0) -> list[CheckResult]:
    out = []
    for k, (name, fn, tol) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        try:
            value = float(fn(rng))
            ok = bool(value <= tol)
        except Exception as exc:  # a crashing check is a failed check
            name = f"{name} ({type(exc).__name__}: {exc})"
            value, ok = float("nan"), False
        out.append(CheckResult(name, ok, value, tol, time.perf_counter() - t0))
    return out
