"""CSV / JSON readers and writers for datasets, trajectories and metrics.

All floats are written with ``repr`` so files round-trip exactly and are
byte-identical across runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import manifold as mf
from .camera import CameraModel
from .errors import DataFormatError
from .imu import ImuState, ImuStream, NoiseParams

IMU_HEADER = ["timestamp_ns", "wx", "wy", "wz", "ax", "ay", "az"]
FEATURE_HEADER = ["timestamp_ns", "frame_id", "landmark_id", "u_px", "v_px"]
TRAJ_HEADER = [
    "timestamp_ns", "tx", "ty", "tz", "qw", "qx", "qy", "qz",
    "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz",
]
VAR_HEADER = [
    "var_tx", "var_ty", "var_tz", "var_rx", "var_ry", "var_rz", "var_vx", "var_vy", "var_vz",
    "var_bgx", "var_bgy", "var_bgz", "var_bax", "var_bay", "var_baz",
]
LANDMARK_HEADER = ["id", "x", "y", "z"]
_TRIU = np.triu_indices(15)


def _f(x) -> str:
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: Path, header: list[str], allow_extra: bool = False) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file, header required")
    head = [h.strip() for h in rows[0]]
    if head[: len(header)] != header or (not allow_extra and len(head) != len(header)):
        raise DataFormatError(f"{path}: expected header {','.join(header)}")
    body = [r for r in rows[1:] if r]
    for i, r in enumerate(body, start=2):
        if len(r) != len(head):
            raise DataFormatError(f"{path}:{i}: expected {len(head)} fields, got {len(r)}")
    return head, body


def _floats(path, rows, cols) -> np.ndarray:
    try:
        return np.array([[float(r[c]) for c in cols] for r in rows], dtype=float).reshape(len(rows), len(cols))
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric value ({exc})") from exc


def _ints(path, rows, col) -> np.ndarray:
    try:
        return np.array([int(r[col]) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-integer value ({exc})") from exc


def ns_to_s(ts_ns: np.ndarray) -> np.ndarray:
    return np.asarray(ts_ns, dtype=np.int64).astype(float) * 1e-9


# ---- IMU ---------------------------------------------------------------
def write_imu_csv(path, ts_ns: np.ndarray, stream: ImuStream) -> None:
    rows = (
        [str(int(t))] + [_f(x) for x in w] + [_f(x) for x in a]
        for t, w, a in zip(ts_ns, stream.gyro, stream.accel)
    )
    write_csv(Path(path), IMU_HEADER, rows)


def read_imu_csv(path):
    """Returns ``(timestamps_ns, ImuStream)``."""
    _, rows = _read_rows(path, IMU_HEADER)
    ts = _ints(path, rows, 0)
    if len(ts) == 0:
        raise DataFormatError(f"{path}: no IMU samples")
    if np.any(np.diff(ts) <= 0):
        raise DataFormatError(f"{path}: timestamps must be strictly increasing")
    v = _floats(path, rows, range(1, 7))
    return ts, ImuStream(ns_to_s(ts), v[:, 0:3], v[:, 3:6])


# ---- features -----------------------------------------------------------
@dataclass
class Frame:
    frame_id: int
    timestamp_ns: int
    observations: dict = field(default_factory=dict)

    @property
    def t(self) -> float:
        return float(ns_to_s(np.array([self.timestamp_ns]))[0])


def write_features_csv(path, frames: list[Frame]) -> None:
    rows = []
    for fr in frames:
        for lid, px in fr.observations.items():
            rows.append([str(int(fr.timestamp_ns)), str(int(fr.frame_id)), str(int(lid)), _f(px[0]), _f(px[1])])
    write_csv(Path(path), FEATURE_HEADER, rows)


def read_features_csv(path, frame_timestamps_ns: list[int] | None = None) -> list[Frame]:
    """Group feature rows into frames (ordered by frame id).

    ``frame_timestamps_ns`` lists every camera frame so frames without any
    feature are preserved.
    """
    _, rows = _read_rows(path, FEATURE_HEADER)
    frames: dict[int, Frame] = {}
    if frame_timestamps_ns is not None:
        for i, t in enumerate(frame_timestamps_ns):
            frames[i] = Frame(i, int(t))
    for r in rows:
        try:
            t, fid, lid = int(r[0]), int(r[1]), int(r[2])
            px = np.array([float(r[3]), float(r[4])])
        except ValueError as exc:
            raise DataFormatError(f"{path}: malformed feature row {r}") from exc
        fr = frames.setdefault(fid, Frame(fid, t))
        if fr.timestamp_ns != t:
            raise DataFormatError(f"{path}: frame {fid} has inconsistent timestamps")
        fr.observations[lid] = px
    out = [frames[k] for k in sorted(frames)]
    if any(b.timestamp_ns <= a.timestamp_ns for a, b in zip(out, out[1:])):
        raise DataFormatError(f"{path}: frame timestamps must increase with frame id")
    return out


# ---- trajectories --------------------------------------------------------
def write_trajectory_csv(path, ts_ns, states: list[ImuState], covariances=None) -> None:
    header = TRAJ_HEADER + (VAR_HEADER if covariances is not None else [])
    rows = []
    for i, (t, s) in enumerate(zip(ts_ns, states)):
        row = [str(int(t))] + [_f(x) for x in np.concatenate([s.t, s.q, s.v, s.bg, s.ba])]
        if covariances is not None:
            row += [_f(x) for x in np.diag(covariances[i])]
        rows.append(row)
    write_csv(Path(path), header, rows)


def read_trajectory_csv(path):
    """Returns ``(timestamps_ns, states, variances or None)``."""
    head, rows = _read_rows(path, TRAJ_HEADER, allow_extra=True)
    extra = head[len(TRAJ_HEADER):]
    if extra and extra != VAR_HEADER:
        raise DataFormatError(f"{path}: unexpected extra columns {extra}")
    ts = _ints(path, rows, 0)
    v = _floats(path, rows, range(1, 17))
    states = [ImuState(r[0:3], r[3:7], r[7:10], r[10:13], r[13:16]) for r in v]
    var = _floats(path, rows, range(17, 32)) if extra else None
    return ts, states, var


def write_covariance_csv(path, ts_ns, covariances) -> None:
    header = ["timestamp_ns"] + [f"p{i}_{j}" for i, j in zip(*_TRIU)]
    rows = ([str(int(t))] + [_f(x) for x in np.asarray(P)[_TRIU]] for t, P in zip(ts_ns, covariances))
    write_csv(Path(path), header, rows)


def read_covariance_csv(path):
    header = ["timestamp_ns"] + [f"p{i}_{j}" for i, j in zip(*_TRIU)]
    _, rows = _read_rows(path, header)
    ts = _ints(path, rows, 0)
    v = _floats(path, rows, range(1, len(header)))
    covs = []
    for r in v:
        P = np.zeros((15, 15))
        P[_TRIU] = r
        covs.append(P + np.triu(P, 1).T)
    return ts, covs


# ---- landmarks / camera / json --------------------------------------------
def write_landmarks_csv(path, landmarks: dict) -> None:
    rows = ([str(int(k))] + [_f(x) for x in landmarks[k]] for k in sorted(landmarks))
    write_csv(Path(path), LANDMARK_HEADER, rows)


def read_landmarks_csv(path) -> dict:
    _, rows = _read_rows(path, LANDMARK_HEADER)
    ids = _ints(path, rows, 0)
    v = _floats(path, rows, range(1, 4))
    return {int(i): p for i, p in zip(ids, v)}


def camera_to_dict(model: CameraModel) -> dict:
    return {
        "fx": model.fx, "fy": model.fy, "cx": model.cx, "cy": model.cy,
        "width": model.width, "height": model.height,
        "k": [float(x) for x in model.k], "p": [float(x) for x in model.p],
        "q_CI": [float(x) for x in mf.rotmat_to_quat(model.R_CI)],
        "t_CI": [float(x) for x in model.t_CI],
        "sigma_px": model.sigma_px,
    }


def noise_to_dict(noise: NoiseParams) -> dict:
    return {
        "sigma_g": noise.sigma_g, "sigma_a": noise.sigma_a,
        "sigma_bg": noise.sigma_bg, "sigma_ba": noise.sigma_ba, "gravity": noise.gravity,
    }


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj
