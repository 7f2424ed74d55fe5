"""Sliding-window management: keyframe policy, frame dropping, marginalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..camera import CameraModel
from ..ekf import MIN_PARALLAX_DEG, triangulate
from ..errors import ContractViolation, InitializationDeferred
from ..imu import (
    BIAS_RELINEARIZE_THRESHOLD,
    ImuState,
    ImuStream,
    NoiseParams,
    bias_correct,
    predict_with_preintegration,
    preintegrate,
)
from .factors import HUBER_K, GaugePrior, ImuFactor, PriorFactor, VisualFactor
from .graph import FactorGraph, marginal_covariance, marginalize, optimize

log = logging.getLogger(__name__)


@dataclass
class SmootherConfig:
    window_keyframes: int = 7
    recent_frames: int = 2
    parallax_px: float = 10.0
    min_tracked: int = 20
    min_parallax_deg: float = MIN_PARALLAX_DEG
    method: str = "levenberg_marquardt"
    max_iters: int = 8
    tol: float = 1e-9
    rel_tol: float = 1e-10
    huber: float | None = HUBER_K
    integrator: str = "rk4"
    gauge_sigma_p: float = 1e-6
    gauge_sigma_yaw: float = 1e-6
    bias_threshold: float = BIAS_RELINEARIZE_THRESHOLD
    compute_covariance: bool = True

    def __post_init__(self):
        if self.window_keyframes < 2:
            raise ContractViolation("window must hold at least two keyframes")
        if self.recent_frames < 1:
            raise ContractViolation("at least one recent frame must be kept")


def select_keyframe(parallax_px: float, tracked: int, parallax_threshold: float = 10.0, min_tracked: int = 20) -> bool:
    """Keyframe iff median parallax is large enough or tracking is poor."""
    return parallax_px >= parallax_threshold or tracked <= min_tracked


def frame_key(frame_id: int):
    return ("x", int(frame_id))


def landmark_key(landmark_id: int):
    return ("l", int(landmark_id))


@dataclass
class WindowFrame:
    frame_id: int
    t: float
    keyframe: bool
    obs: dict
    imu_in: ImuStream | None = None

    @property
    def key(self):
        return frame_key(self.frame_id)


@dataclass
class FrameResult:
    frame_id: int
    t: float
    state: ImuState
    covariance: np.ndarray | None
    keyframe: bool
    diagnostics: dict = field(default_factory=dict)


class SlidingWindowSmoother:
    """Fixed-lag smoother over the newest keyframes plus a few recent frames."""

    def __init__(
        self,
        model: CameraModel,
        noise: NoiseParams,
        initial_state: ImuState,
        initial_cov: np.ndarray,
        config: SmootherConfig | None = None,
        sigma_px: float | None = None,
    ):
        self.model = model
        self.noise = noise
        self.cfg = config or SmootherConfig()
        self.sigma = model.sigma_px if sigma_px is None else sigma_px
        self.initial_state = initial_state
        self.initial_cov = np.asarray(initial_cov, dtype=float)
        self.graph = FactorGraph()
        self.frames: list[WindowFrame] = []
        self.tracks: dict[int, dict[int, np.ndarray]] = {}
        self.imu_factors: dict[tuple, ImuFactor] = {}

    # ---- queries -------------------------------------------------------
    @property
    def keyframes(self) -> list[WindowFrame]:
        return [f for f in self.frames if f.keyframe]

    def active_landmarks(self) -> list[int]:
        return [k[1] for k in self.graph.values if k[0] == "l"]

    def state(self, frame_id: int) -> ImuState:
        return self.graph.values[frame_key(frame_id)]

    # ---- main entry ----------------------------------------------------
    def add_frame(self, frame_id: int, t: float, observations: dict, imu: ImuStream | None = None) -> FrameResult:
        """Insert a frame (undistorted pixels by landmark id) and re-optimize.

        ``imu`` holds the samples from the previous frame's time to ``t``
        (both ends included); it is ignored for the first frame.
        """
        obs = {int(k): np.asarray(v, dtype=float) for k, v in observations.items()}
        key = frame_key(frame_id)
        if not self.frames:
            self.graph.add_variable(key, self.initial_state)
            R0 = self.initial_state.R
            self.graph.add_factor(
                GaugePrior(key, self.initial_state.t, R0, self.cfg.gauge_sigma_p, self.cfg.gauge_sigma_yaw)
            )
            self.graph.add_factor(PriorFactor(key, self.initial_state, self.initial_cov))
            frame = WindowFrame(frame_id, t, True, obs)
        else:
            if imu is None or len(imu) < 2:
                raise ContractViolation("consecutive frames need IMU samples between them")
            prev = self.frames[-1]
            xp = self.graph.values[prev.key]
            p = preintegrate(imu, (xp.bg, xp.ba), self.noise, self.cfg.integrator)
            self.graph.add_variable(key, predict_with_preintegration(xp, p, self.noise.gravity_vector))
            self._add_imu_factor(prev.key, key, p)
            par, tracked = self._tracking_stats(obs)
            kf = select_keyframe(par, tracked, self.cfg.parallax_px, self.cfg.min_tracked)
            frame = WindowFrame(frame_id, t, kf, obs, imu)
        self.frames.append(frame)

        for lid, px in obs.items():
            self.tracks.setdefault(lid, {})[frame_id] = px
            if landmark_key(lid) in self.graph.values:
                self._add_visual(frame_id, lid, px)
        self._init_landmarks(obs)

        diag = {}
        if len(self.frames) > 1:
            vals, rep = optimize(
                self.graph, self.cfg.method, self.cfg.max_iters, self.cfg.tol, rel_tol=self.cfg.rel_tol
            )
            self.graph.values = vals
            diag = rep.as_dict()
            self._relinearize_biases()
        cov = None
        if self.cfg.compute_covariance:
            system = rep.system if len(self.frames) > 1 else None
            cov = marginal_covariance(self.graph, key, system=system)
        result = FrameResult(frame_id, t, self.graph.values[key], cov, frame.keyframe, diag)
        diag.update({"frame_id": int(frame_id), "window_frames": len(self.frames),
                     "landmarks": len(self.active_landmarks()), "keyframe": bool(frame.keyframe)})
        self._maintain()
        return result

    # ---- helpers -------------------------------------------------------
    def _tracking_stats(self, obs: dict) -> tuple[float, int]:
        last_kf = self.keyframes[-1]
        common = [lid for lid in obs if lid in last_kf.obs]
        if not common:
            return 0.0, 0
        disp = [np.linalg.norm(obs[lid] - last_kf.obs[lid]) for lid in common]
        return float(np.median(disp)), len(common)

    def _add_imu_factor(self, ki, kj, p) -> None:
        f = ImuFactor(ki, kj, p, self.noise.gravity_vector)
        self.graph.add_factor(f)
        self.imu_factors[(ki, kj)] = f

    def _add_visual(self, frame_id: int, lid: int, px: np.ndarray) -> None:
        self.graph.add_factor(
            VisualFactor(frame_key(frame_id), landmark_key(lid), px, self.model, self.sigma, self.cfg.huber)
        )

    def _init_landmarks(self, obs: dict) -> None:
        for lid in obs:
            lk = landmark_key(lid)
            if lk in self.graph.values:
                continue
            views = self.tracks.get(lid, {})
            if len(views) < 2:
                continue
            pairs = [(self.graph.values[frame_key(fid)], px) for fid, px in views.items()]
            try:
                L, _ = triangulate(pairs, self.model, self.sigma, self.cfg.min_parallax_deg)
            except InitializationDeferred:
                continue
            self.graph.add_variable(lk, L)
            for fid, px in views.items():
                self._add_visual(fid, lid, px)

    def _relinearize_biases(self) -> None:
        for (ki, kj), f in self.imu_factors.items():
            xi = self.graph.values[ki]
            p = f.preint
            delta = np.concatenate([xi.bg - p.bias_g, xi.ba - p.bias_a])
            if np.max(np.abs(delta)) > self.cfg.bias_threshold:
                f.set_preintegration(bias_correct(p, (xi.bg, xi.ba), self.cfg.bias_threshold))

    def _maintain(self) -> None:
        n = self.cfg.recent_frames
        for fr in list(self.frames[:-n]):
            if not fr.keyframe:
                self._drop_frame(fr)
        while len(self.keyframes) > self.cfg.window_keyframes:
            self.marginalize_oldest()

    def _remove_landmark(self, lid: int) -> None:
        lk = landmark_key(lid)
        self.graph.remove_factors(self.graph.factors_of(lk))
        self.graph.remove_variable(lk)

    def _prune_landmarks(self) -> None:
        """Drop landmarks left with fewer than two views and no other constraint."""
        index = self.graph.factor_index()
        doomed = []
        for lid in self.active_landmarks():
            lk = landmark_key(lid)
            fs = index.get(lk, [])
            if len(fs) < 2 and all(isinstance(f, VisualFactor) for f in fs):
                doomed.extend(fs)
                self.graph.values.pop(lk)
        self.graph.remove_factors(doomed)

    def _drop_frame(self, fr: WindowFrame) -> None:
        """Discard a non-keyframe: remove its visual factors and merge its IMU factors."""
        i = self.frames.index(fr)
        if i == 0 or i == len(self.frames) - 1:
            raise ContractViolation("only interior frames can be dropped")
        prev, nxt = self.frames[i - 1], self.frames[i + 1]
        g = self.graph
        g.remove_factors([f for f in g.factors_of(fr.key) if isinstance(f, VisualFactor)])
        f_in = self.imu_factors.pop((prev.key, fr.key))
        f_out = self.imu_factors.pop((fr.key, nxt.key))
        g.remove_factors([f_in, f_out])
        g.remove_variable(fr.key)
        merged = fr.imu_in.concat(nxt.imu_in)
        xp = g.values[prev.key]
        self._add_imu_factor(prev.key, nxt.key, preintegrate(merged, (xp.bg, xp.ba), self.noise, self.cfg.integrator))
        nxt.imu_in = merged
        self.frames.pop(i)
        for views in self.tracks.values():
            views.pop(fr.frame_id, None)
        self._prune_landmarks()

    def marginalize_oldest(self) -> None:
        """Marginalize the oldest frame and the landmarks only it still observes."""
        if len(self.frames) < 2:
            raise ContractViolation("window too short to marginalize")
        old = self.frames[0]
        g = self.graph
        index = g.factor_index()
        solo = []
        for f in index[old.key]:
            if isinstance(f, VisualFactor):
                lk = f.keys[1]
                if all(isinstance(o, VisualFactor) and o.keys[0] == old.key for o in index[lk]):
                    solo.append(lk)
        # a landmark seen once carries no pose information once marginalized
        for lk in list(solo):
            if all(isinstance(o, VisualFactor) for o in index[lk]):
                self._remove_landmark(lk[1])
                solo.remove(lk)
        # landmarks held only by the dense prior leave together with the frame
        for lid in self.active_landmarks():
            fs = index.get(landmark_key(lid), [])
            if fs and not any(isinstance(f, VisualFactor) for f in fs):
                solo.append(landmark_key(lid))
        self.graph = marginalize(g, [old.key] + solo)
        self.imu_factors = {k: f for k, f in self.imu_factors.items() if old.key not in k}
        self.frames.pop(0)
        for views in self.tracks.values():
            views.pop(old.frame_id, None)
        self.tracks = {k: v for k, v in self.tracks.items() if v}
        self._prune_landmarks()


def initialize_window(
    frame_times: Sequence[float],
    observations: Sequence[dict],
    imu_streams: Sequence[ImuStream],
    initial_state: ImuState,
    initial_cov: np.ndarray,
    model: CameraModel,
    noise: NoiseParams,
    config: SmootherConfig | None = None,
    sigma_px: float | None = None,
):
    """Dead-reckon the frames, triangulate landmarks and run one optimization.

    ``imu_streams[k]`` spans frame ``k`` to frame ``k+1``.  The first state is
    the ground-start state, pinned in position and yaw.  Returns
    ``(values, graph, report)``.
    """
    cfg = config or SmootherConfig()
    if len(frame_times) < 2:
        raise InitializationDeferred("need at least two frames")
    if len(imu_streams) != len(frame_times) - 1 or len(observations) != len(frame_times):
        raise ContractViolation("frames, observations and IMU streams are inconsistent")
    sigma = model.sigma_px if sigma_px is None else sigma_px
    graph = FactorGraph()
    graph.add_variable(frame_key(0), initial_state)
    graph.add_factor(GaugePrior(frame_key(0), initial_state.t, initial_state.R, cfg.gauge_sigma_p, cfg.gauge_sigma_yaw))
    graph.add_factor(PriorFactor(frame_key(0), initial_state, initial_cov))
    x = initial_state
    for k, stream in enumerate(imu_streams):
        p = preintegrate(stream, (x.bg, x.ba), noise, cfg.integrator)
        x = predict_with_preintegration(x, p, noise.gravity_vector)
        graph.add_variable(frame_key(k + 1), x)
        graph.add_factor(ImuFactor(frame_key(k), frame_key(k + 1), p, noise.gravity_vector))
    views: dict[int, dict[int, np.ndarray]] = {}
    for k, obs in enumerate(observations):
        for lid, px in obs.items():
            views.setdefault(int(lid), {})[k] = np.asarray(px, dtype=float)
    n_lm = 0
    for lid, vs in sorted(views.items()):
        if len(vs) < 2:
            continue
        pairs = [(graph.values[frame_key(k)], px) for k, px in vs.items()]
        try:
            L, _ = triangulate(pairs, model, sigma, cfg.min_parallax_deg)
        except InitializationDeferred:
            continue
        graph.add_variable(landmark_key(lid), L)
        for k, px in vs.items():
            graph.add_factor(VisualFactor(frame_key(k), landmark_key(lid), px, model, sigma, cfg.huber))
        n_lm += 1
    if n_lm == 0:
        raise InitializationDeferred("no landmark has enough parallax")
    values, rep = optimize(graph, cfg.method, max(cfg.max_iters, 10), cfg.tol)
    graph.values = values
    return values, graph, rep
