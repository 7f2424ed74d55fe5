"""End-to-end wiring: datasets on disk, estimator runs and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import manifold as mf
from . import metrics as mt
from .camera import CameraModel, FeatureObservation, undistort_pixel
from .config import EvalConfig, RunConfig, parse_camera, parse_noise
from .ekf import FilterState, filter_propagate, filter_update, initialize_landmark, marginalize_landmark
from .errors import ContractViolation, DataFormatError, EstimatorDiverged, InitializationDeferred
from .imu import ImuState, ImuStream, NoiseParams
from .sim import SimData
from .smoother import SlidingWindowSmoother, SmootherConfig

log = logging.getLogger(__name__)

DIVERGENCE_SPEED = 1e3


@dataclass
class Dataset:
    imu_ns: np.ndarray
    imu: ImuStream
    frames: list[io.Frame]
    camera: CameraModel
    noise: NoiseParams
    groundtruth_ns: np.ndarray | None = None
    groundtruth: list[ImuState] | None = None
    landmarks: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_sim(cls, data: SimData) -> "Dataset":
        sc = data.scenario
        frames = []
        for k, (idx, feats) in enumerate(zip(data.frame_sample_index, data.features)):
            frames.append(io.Frame(k, int(data.timestamps_ns[idx]), {lid: px for lid, px in feats}))
        return cls(
            imu_ns=data.timestamps_ns,
            imu=data.imu,
            frames=frames,
            camera=sc.camera,
            noise=sc.noise,
            groundtruth_ns=data.timestamps_ns,
            groundtruth=data.truth,
            landmarks=data.landmarks,
            meta={"imu_rate": sc.imu_rate, "camera_rate": sc.camera_rate, "pixel_noise": sc.pixel_noise},
        )


def write_dataset(data: SimData, out: Path, config_raw: dict | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = Dataset.from_sim(data)
    sc = data.scenario
    io.write_imu_csv(out / "imu.csv", ds.imu_ns, ds.imu)
    io.write_features_csv(out / "features.csv", ds.frames)
    io.write_trajectory_csv(out / "groundtruth.csv", ds.groundtruth_ns, ds.groundtruth)
    io.write_landmarks_csv(out / "landmarks.csv", ds.landmarks)
    io.write_json(out / "camera.json", io.camera_to_dict(sc.camera))
    meta = {
        "imu_rate": sc.imu_rate,
        "camera_rate": sc.camera_rate,
        "duration": sc.duration,
        "seed": sc.seed,
        "pixel_noise": sc.pixel_noise,
        "noise": io.noise_to_dict(sc.noise),
        "frame_timestamps_ns": [int(f.timestamp_ns) for f in ds.frames],
    }
    io.write_json(out / "dataset.json", meta)
    if config_raw is not None:
        io.write_json(out / "config.json", config_raw)


def load_dataset(path: Path) -> Dataset:
    path = Path(path)
    for name in ("imu.csv", "features.csv", "camera.json", "dataset.json"):
        if not (path / name).is_file():
            raise FileNotFoundError(f"dataset file missing: {path / name}")
    meta = io.read_json(path / "dataset.json")
    imu_ns, imu = io.read_imu_csv(path / "imu.csv")
    frames = io.read_features_csv(path / "features.csv", meta.get("frame_timestamps_ns"))
    camera = parse_camera(io.read_json(path / "camera.json"))
    noise = parse_noise(meta.get("noise", {}), "dataset.noise")
    gt_ns = gt = lms = None
    if (path / "groundtruth.csv").is_file():
        gt_ns, gt, _ = io.read_trajectory_csv(path / "groundtruth.csv")
    if (path / "landmarks.csv").is_file():
        lms = io.read_landmarks_csv(path / "landmarks.csv")
    return Dataset(imu_ns, imu, frames, camera, noise, gt_ns, gt, lms, meta)


# ---- estimator setup ------------------------------------------------------
def estimator_noise(ds: Dataset, cfg: RunConfig) -> NoiseParams:
    """Configured noise, else the dataset's; all-zero densities fall back to defaults."""
    if cfg.noise is not None:
        return cfg.noise
    n = ds.noise
    if n.sigma_g == n.sigma_a == n.sigma_bg == n.sigma_ba == 0.0:
        return NoiseParams(gravity=n.gravity)
    return n


def estimator_sigma_px(ds: Dataset, cfg: RunConfig) -> float:
    if cfg.sigma_px is not None:
        return cfg.sigma_px
    s = float(ds.meta.get("pixel_noise", ds.camera.sigma_px))
    return s if s > 0.0 else 1.0


def ground_start_frame(state: ImuState) -> tuple[np.ndarray, np.ndarray]:
    """World-to-estimator transform: origin at the first IMU position, zero yaw, gravity kept."""
    Rz = mf.yaw_rotation(-mf.yaw_of(state.R))
    return Rz, -Rz @ state.t


def transform_state(s: ImuState, R: np.ndarray, t: np.ndarray) -> ImuState:
    return ImuState(R @ s.t + t, mf.quat_mul(mf.rotmat_to_quat(R), s.q), R @ s.v, s.bg, s.ba)


def initial_state(ds: Dataset, cfg: RunConfig) -> ImuState:
    if not ds.groundtruth:
        raise DataFormatError("ground start needs groundtruth.csv in the dataset")
    t0 = ds.frames[0].timestamp_ns
    i = int(np.searchsorted(ds.groundtruth_ns, t0))
    if i >= len(ds.groundtruth_ns) or ds.groundtruth_ns[i] != t0:
        raise DataFormatError("no ground-truth state at the first camera frame")
    gt0 = ds.groundtruth[i]
    R, t = ground_start_frame(gt0)
    x0 = transform_state(gt0, R, t)
    if cfg.perturb_initial:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
        L = np.linalg.cholesky(cfg.initial_std.covariance())
        x0 = x0.boxplus(L @ rng.standard_normal(15))
    return x0


def _undistorted(frame: io.Frame, model: CameraModel) -> dict:
    if not model.has_distortion:
        return dict(frame.observations)
    return {lid: undistort_pixel(px, model) for lid, px in frame.observations.items()}


def _check_finite(state: ImuState, t: float) -> None:
    vec = state.to_vector()
    if not np.all(np.isfinite(vec)) or np.linalg.norm(state.v) > DIVERGENCE_SPEED:
        raise EstimatorDiverged(f"estimate diverged at t={t:.3f} s")


@dataclass
class RunResult:
    timestamps_ns: list[int]
    states: list[ImuState]
    covariances: list[np.ndarray]
    diagnostics: list[dict]


def run_filter(ds: Dataset, cfg: RunConfig) -> RunResult:
    noise = estimator_noise(ds, cfg)
    sigma = estimator_sigma_px(ds, cfg)
    model = ds.camera.undistorted()
    fs = FilterState(initial_state(ds, cfg), {}, cfg.initial_std.covariance(), ds.frames[0].t)
    pending: dict[int, list] = {}
    out = RunResult([], [], [], [])
    prev_t = None
    for frame in ds.frames:
        t = frame.t
        if prev_t is not None:
            fs = filter_propagate(fs, ds.imu.between(prev_t, t), noise, cfg.integrator)
        prev_t = t
        obs = _undistorted(frame, ds.camera)
        known = [FeatureObservation(frame.frame_id, lid, px, sigma) for lid, px in obs.items() if lid in fs.landmarks]
        fs, rep = filter_update(fs, known, model, sigma, cfg.gate, iterated=cfg.iterated)
        for lid in [k for k in fs.landmarks if k not in obs]:
            fs = marginalize_landmark(fs, lid)
        pending = {lid: v for lid, v in pending.items() if lid in obs}
        n_new = 0
        for lid, px in obs.items():
            if lid in fs.landmarks:
                continue
            views = pending.setdefault(lid, [])
            views.append((fs.imu, px))
            if len(views) >= 2:
                try:
                    fs = initialize_landmark(
                        fs, lid, views, model, sigma, cfg.min_parallax_deg, correlated=cfg.correlated_init
                    )
                    del pending[lid]
                    n_new += 1
                except InitializationDeferred:
                    pass
        _check_finite(fs.imu, t)
        out.timestamps_ns.append(int(frame.timestamp_ns))
        out.states.append(fs.imu)
        out.covariances.append(fs.P[:15, :15].copy())
        out.diagnostics.append({
            "frame_id": int(frame.frame_id),
            "observations": rep.n_observations,
            "accepted": rep.n_accepted,
            "gated": len(rep.gated_ids),
            "iterations": rep.iterations,
            "landmarks": len(fs.landmarks),
            "initialized": n_new,
        })
    return out


def smoother_config(cfg: RunConfig) -> SmootherConfig:
    return SmootherConfig(
        window_keyframes=cfg.window_keyframes,
        recent_frames=cfg.recent_frames,
        parallax_px=cfg.keyframe_parallax_px,
        min_tracked=cfg.keyframe_min_tracked,
        min_parallax_deg=cfg.min_parallax_deg,
        method=cfg.method,
        max_iters=cfg.max_iters,
        huber=cfg.huber,
        integrator=cfg.integrator,
    )


def run_smoother(ds: Dataset, cfg: RunConfig) -> RunResult:
    noise = estimator_noise(ds, cfg)
    sigma = estimator_sigma_px(ds, cfg)
    model = ds.camera.undistorted()
    sm = SlidingWindowSmoother(model, noise, initial_state(ds, cfg), cfg.initial_std.covariance(),
                               smoother_config(cfg), sigma)
    out = RunResult([], [], [], [])
    prev_t = None
    for frame in ds.frames:
        t = frame.t
        imu = ds.imu.between(prev_t, t) if prev_t is not None else None
        prev_t = t
        res = sm.add_frame(frame.frame_id, t, _undistorted(frame, ds.camera), imu)
        _check_finite(res.state, t)
        out.timestamps_ns.append(int(frame.timestamp_ns))
        out.states.append(res.state)
        out.covariances.append(res.covariance)
        out.diagnostics.append(res.diagnostics)
    return out


def run_estimator(ds: Dataset, cfg: RunConfig) -> RunResult:
    if len(ds.frames) == 0:
        raise ContractViolation("dataset has no camera frames")
    if cfg.estimator == "filter":
        return run_filter(ds, cfg)
    if cfg.estimator == "smoother":
        return run_smoother(ds, cfg)
    raise ContractViolation(f"unknown estimator {cfg.estimator!r}")


def write_run(res: RunResult, out: Path, cfg: RunConfig) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    covs = res.covariances if all(c is not None for c in res.covariances) else None
    io.write_trajectory_csv(out / "trajectory.csv", res.timestamps_ns, res.states, covs)
    if covs is not None:
        io.write_covariance_csv(out / "covariance.csv", res.timestamps_ns, covs)
    io.write_json(out / "diagnostics.json", {"estimator": cfg.estimator, "windows": res.diagnostics})


# ---- evaluation -----------------------------------------------------------
def evaluate(
    est_ns, est_states, gt_ns, gt_states, cfg: EvalConfig, covariances=None
) -> tuple[dict, list[list]]:
    """Metrics dictionary plus per-timestamp error rows for plotting."""
    t_est = io.ns_to_s(est_ns)
    t_gt = io.ns_to_s(gt_ns)
    ie, ig = mt.associate(t_est, t_gt, cfg.association_tol)
    if len(ie) < 2:
        raise ContractViolation("fewer than two estimate/ground-truth timestamps matched")
    est = [est_states[i] for i in ie]
    gt = [gt_states[i] for i in ig]
    pair = mt.TrajectoryPair.from_states(t_est[ie], est, gt)
    if cfg.alignment == "none":
        R, t = np.eye(3), np.zeros(3)
        aligned = pair
    else:
        aligned, R, t = mt.align(pair, cfg.alignment)
    duration = float(pair.t[-1] - pair.t[0])
    delta = min(cfg.rpe_delta, duration) if cfg.rpe_unit == "s" else cfg.rpe_delta
    rp = mt.rpe(aligned, delta, cfg.rpe_unit)
    pos_err = mt.position_errors(aligned)
    rot_err = [float(np.linalg.norm(mf.quat_boxminus(a, b))) for a, b in zip(aligned.est_q, aligned.gt_q)]
    nees_vals = nees_pose = None
    if covariances is not None:
        # errors are compared in the aligned frame; position and velocity blocks rotate with it
        T = np.eye(15)
        T[0:3, 0:3] = R
        T[6:9, 6:9] = R
        cov = [T @ covariances[i] @ T.T for i in ie]
        est_al = [transform_state(s, R, t) for s in est]
        try:
            nees_vals, _ = mt.nees(est_al, cov, gt)
            nees_pose, _ = mt.nees(est_al, cov, gt, pose_only=True)
        except ContractViolation as exc:
            log.warning("NEES skipped: %s", exc)
    metrics = {
        "ate_rmse_m": mt.ate(aligned),
        "rpe_trans_rmse": rp.trans_rmse,
        "rpe_rot_rmse_rad": rp.rot_rmse,
        "avg_nees": None if nees_vals is None else float(np.mean(nees_vals)),
        "avg_nees_pose": None if nees_pose is None else float(np.mean(nees_pose)),
        "alignment": cfg.alignment,
        "alignment_rotation": R,
        "alignment_translation": t,
        "matched_poses": int(len(ie)),
        "rpe_delta": delta,
        "rpe_unit": cfg.rpe_unit,
        "rpe_segments": {
            "start_time_s": rp.start_times,
            "trans_m": rp.trans,
            "rot_rad": rp.rot,
        },
    }
    rows = []
    for k in range(len(ie)):
        rows.append([
            str(int(est_ns[ie[k]])),
            repr(float(pos_err[k])),
            repr(float(rot_err[k])),
            "" if nees_vals is None else repr(float(nees_vals[k])),
        ])
    return metrics, rows
