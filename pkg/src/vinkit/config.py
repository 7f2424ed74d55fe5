"""Run configuration documents.

A config file is a JSON object with up to four sections::

    {
      "seed": 0,
      "scenario": {...},   # simulator world (see Scenario)
      "run": {...},        # estimator settings (see RunConfig)
      "evaluate": {...}    # metric settings (see EvalConfig)
    }

Unknown keys are rejected with a ``ConfigError`` naming the key.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import manifold as mf
from .camera import CameraModel
from .errors import ConfigError, DataFormatError
from .imu import INTEGRATORS, NoiseParams
from .io import read_json
from .sim import FAMILIES, AnalyticTrajectory, Scenario, default_camera

ESTIMATORS = ("filter", "smoother")


@dataclass
class InitialStd:
    """Initial 1-sigma uncertainty of the ground-start state."""

    position: float = 1e-3
    rotation: float = 1e-3
    velocity: float = 1e-2
    gyro_bias: float = 1e-3
    accel_bias: float = 1e-2

    def covariance(self) -> np.ndarray:
        s = np.repeat([self.position, self.rotation, self.velocity, self.gyro_bias, self.accel_bias], 3)
        return np.diag(s * s)


@dataclass
class RunConfig:
    estimator: str = "smoother"
    integrator: str = "rk4"
    window_keyframes: int = 7
    recent_frames: int = 2
    keyframe_parallax_px: float = 10.0
    keyframe_min_tracked: int = 20
    min_parallax_deg: float = 3.0
    method: str = "levenberg_marquardt"
    max_iters: int = 8
    huber: float | None = 1.345
    noise: NoiseParams | None = None
    sigma_px: float | None = None
    gate_probability: float = 0.999
    iterated: bool = False
    correlated_init: bool = True
    initial_std: InitialStd = field(default_factory=InitialStd)
    perturb_initial: bool = False
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.estimator not in ESTIMATORS:
            raise ConfigError("run.estimator", f"must be one of {ESTIMATORS}")
        if self.integrator not in INTEGRATORS:
            raise ConfigError("run.integrator", f"must be one of {INTEGRATORS}")
        if self.method not in ("levenberg_marquardt", "gauss_newton"):
            raise ConfigError("run.method", "must be levenberg_marquardt or gauss_newton")
        if self.window_keyframes < 2:
            raise ConfigError("run.window_keyframes", "must be at least 2")
        if self.recent_frames < 1:
            raise ConfigError("run.recent_frames", "must be at least 1")
        if not 0.0 < self.gate_probability < 1.0:
            raise ConfigError("run.gate_probability", "must lie in (0, 1)")
        if self.sigma_px is not None and not self.sigma_px > 0.0:
            raise ConfigError("run.sigma_px", "must be positive")
        return self

    @property
    def gate(self) -> float:
        # chi-square quantile with 2 dof has a closed form
        return -2.0 * math.log(1.0 - self.gate_probability)


@dataclass
class EvalConfig:
    alignment: str = "four_dof"
    rpe_delta: float = 1.0
    rpe_unit: str = "s"
    association_tol: float = 1e-3

    def validate(self) -> "EvalConfig":
        if self.alignment not in ("four_dof", "se3", "none"):
            raise ConfigError("evaluate.alignment", "must be four_dof, se3 or none")
        if self.rpe_unit not in ("s", "m"):
            raise ConfigError("evaluate.rpe_unit", "must be 's' or 'm'")
        if not self.rpe_delta > 0.0:
            raise ConfigError("evaluate.rpe_delta", "must be positive")
        return self


@dataclass
class Config:
    seed: int = 0
    scenario: Scenario | None = None
    run: RunConfig = field(default_factory=RunConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    raw: dict = field(default_factory=dict)


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(section, "must be a JSON object")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{section}.{k}" if section else k, "unknown key")


def _num(section, key, v, kind=float):
    try:
        if isinstance(v, bool):
            raise TypeError
        out = kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key}", f"expected a {kind.__name__}") from None
    if kind is float and not math.isfinite(out):
        raise ConfigError(f"{section}.{key}", "must be finite")
    return out


def _vec(section, key, v, n):
    if not isinstance(v, list) or len(v) != n:
        raise ConfigError(f"{section}.{key}", f"expected a list of {n} numbers")
    return np.array([_num(section, key, x) for x in v])


def parse_noise(d: dict, section: str = "noise") -> NoiseParams:
    fields = ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "gravity")
    _check_keys(section, d, fields)
    kw = {k: _num(section, k, d[k]) for k in fields if k in d}
    for k, v in kw.items():
        if k != "gravity" and v < 0.0:
            raise ConfigError(f"{section}.{k}", "must be non-negative")
    return NoiseParams(**kw)


def parse_camera(d: dict, section: str = "camera") -> CameraModel:
    allowed = ("fx", "fy", "cx", "cy", "width", "height", "k", "p", "q_CI", "t_CI", "sigma_px")
    _check_keys(section, d, allowed)
    base = default_camera()
    kw = {}
    for k in ("fx", "fy", "cx", "cy", "sigma_px"):
        kw[k] = _num(section, k, d[k]) if k in d else getattr(base, k)
    for k in ("width", "height"):
        kw[k] = _num(section, k, d[k], int) if k in d else getattr(base, k)
    kw["k"] = _vec(section, "k", d["k"], 6) if "k" in d else base.k
    kw["p"] = _vec(section, "p", d["p"], 2) if "p" in d else base.p
    kw["R_CI"] = mf.quat_to_rotmat(mf.canonical(_vec(section, "q_CI", d["q_CI"], 4))) if "q_CI" in d else base.R_CI
    kw["t_CI"] = _vec(section, "t_CI", d["t_CI"], 3) if "t_CI" in d else base.t_CI
    if not (kw["fx"] > 0 and kw["fy"] > 0):
        raise ConfigError(f"{section}.fx", "focal lengths must be positive")
    if not (kw["width"] > 0 and kw["height"] > 0):
        raise ConfigError(f"{section}.width", "image size must be positive")
    return CameraModel(**kw)


def parse_scenario(d: dict, seed: int = 0) -> Scenario:
    allowed = (
        "trajectory", "camera", "noise", "pixel_noise", "imu_rate", "camera_rate", "duration",
        "landmarks", "max_range", "initial_bias", "quantize_pixels",
    )
    _check_keys("scenario", d, allowed)
    traj_d = d.get("trajectory", {})
    _check_keys("scenario.trajectory", traj_d, ("family", "radius", "rate", "amplitude", "height", "attitude"))
    tkw = {}
    if "family" in traj_d:
        if traj_d["family"] not in FAMILIES:
            raise ConfigError("scenario.trajectory.family", f"must be one of {FAMILIES}")
        tkw["family"] = traj_d["family"]
    for k in ("radius", "rate", "amplitude", "height"):
        if k in traj_d:
            tkw[k] = _num("scenario.trajectory", k, traj_d[k])
    if "attitude" in traj_d:
        if traj_d["attitude"] not in ("yaw_following", "fixed"):
            raise ConfigError("scenario.trajectory.attitude", "must be yaw_following or fixed")
        tkw["attitude"] = traj_d["attitude"]
    kw = {"trajectory": AnalyticTrajectory(**tkw), "seed": int(seed)}
    if "camera" in d:
        kw["camera"] = parse_camera(d["camera"], "scenario.camera")
    if "noise" in d:
        kw["noise"] = parse_noise(d["noise"], "scenario.noise")
    if "pixel_noise" in d:
        kw["pixel_noise"] = _num("scenario", "pixel_noise", d["pixel_noise"])
        if kw["pixel_noise"] < 0.0:
            raise ConfigError("scenario.pixel_noise", "must be non-negative")
    for k in ("imu_rate", "camera_rate"):
        if k in d:
            kw[k] = _num("scenario", k, d[k], int)
            if kw[k] <= 0:
                raise ConfigError(f"scenario.{k}", "must be positive")
    if kw.get("imu_rate", 200) % kw.get("camera_rate", 20):
        raise ConfigError("scenario.camera_rate", "IMU rate must be an integer multiple of the camera rate")
    if 10**9 % kw.get("imu_rate", 200):
        raise ConfigError("scenario.imu_rate", "must divide 1e9 so timestamps are exact")
    for k in ("duration", "max_range"):
        if k in d:
            kw[k] = _num("scenario", k, d[k])
            if not kw[k] > 0.0:
                raise ConfigError(f"scenario.{k}", "must be positive")
    if "landmarks" in d:
        ld = d["landmarks"]
        _check_keys("scenario.landmarks", ld, ("count", "shell"))
        if "count" in ld:
            kw["n_landmarks"] = _num("scenario.landmarks", "count", ld["count"], int)
        if "shell" in ld:
            sh = _vec("scenario.landmarks", "shell", ld["shell"], 2)
            if not 0.0 < sh[0] <= sh[1]:
                raise ConfigError("scenario.landmarks.shell", "needs 0 < inner <= outer")
            kw["shell"] = (float(sh[0]), float(sh[1]))
    if "initial_bias" in d:
        bd = d["initial_bias"]
        _check_keys("scenario.initial_bias", bd, ("gyro", "accel"))
        if "gyro" in bd:
            kw["initial_bg"] = _vec("scenario.initial_bias", "gyro", bd["gyro"], 3)
        if "accel" in bd:
            kw["initial_ba"] = _vec("scenario.initial_bias", "accel", bd["accel"], 3)
    if "quantize_pixels" in d:
        kw["quantize_pixels"] = bool(d["quantize_pixels"])
    return Scenario(**kw)


def parse_run(d: dict, seed: int = 0) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)} - {"seed"}
    _check_keys("run", d, names)
    cfg = RunConfig(seed=int(seed))
    for k, v in d.items():
        if k == "noise":
            cfg.noise = parse_noise(v, "run.noise")
        elif k == "initial_std":
            _check_keys("run.initial_std", v, {f.name for f in dataclasses.fields(InitialStd)})
            cfg.initial_std = InitialStd(**{kk: _num("run.initial_std", kk, vv) for kk, vv in v.items()})
        elif k in ("estimator", "integrator", "method"):
            if not isinstance(v, str):
                raise ConfigError(f"run.{k}", "expected a string")
            setattr(cfg, k, v)
        elif k in ("iterated", "correlated_init", "perturb_initial"):
            if not isinstance(v, bool):
                raise ConfigError(f"run.{k}", "expected true or false")
            setattr(cfg, k, v)
        elif k in ("window_keyframes", "recent_frames", "keyframe_min_tracked", "max_iters"):
            setattr(cfg, k, _num("run", k, v, int))
        elif k in ("huber", "sigma_px") and v is None:
            setattr(cfg, k, None)
        else:
            setattr(cfg, k, _num("run", k, v))
    return cfg.validate()


def parse_evaluate(d: dict) -> EvalConfig:
    _check_keys("evaluate", d, {f.name for f in dataclasses.fields(EvalConfig)})
    cfg = EvalConfig()
    for k, v in d.items():
        if k in ("alignment", "rpe_unit"):
            if not isinstance(v, str):
                raise ConfigError(f"evaluate.{k}", "expected a string")
            setattr(cfg, k, v)
        else:
            setattr(cfg, k, _num("evaluate", k, v))
    return cfg.validate()


def parse_config(d: dict) -> Config:
    _check_keys("", d, ("seed", "scenario", "run", "evaluate", "description"))
    seed = _num("", "seed", d.get("seed", 0), int)
    return Config(
        seed=seed,
        scenario=parse_scenario(d["scenario"], seed) if "scenario" in d else None,
        run=parse_run(d.get("run", {}), seed),
        evaluate=parse_evaluate(d.get("evaluate", {})),
        raw=d,
    )


def load_config(path) -> Config:
    path = Path(path)
    try:
        d = read_json(path)
    except DataFormatError as exc:
        raise ConfigError(str(path), str(exc)) from exc
    return parse_config(d)
