"""Pinhole camera measurement chain, landmark parametrizations and residuals.

The chain is ``observe = intrinsics ∘ distort ∘ project ∘ transform_to_camera``.
Estimators work on undistorted pixels (``distorted=False``); the simulator
applies distortion and :func:`undistort_pixel` removes it again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import manifold as mf
from .errors import ContractViolation, InvalidDepth, OutOfImage, PointNotVisible, ResidualUndefined
from .imu import ImuState

Z_MIN = 1e-6
METRICS = ("image_plane", "unit_plane", "unit_bearing", "bearing_angle")

# IMU x forward / y left / z up  ->  camera z forward / x right / y down
FORWARD_LOOKING_R_CI = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k: np.ndarray = field(default_factory=lambda: np.zeros(6))
    p: np.ndarray = field(default_factory=lambda: np.zeros(2))
    R_CI: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_CI: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_px: float = 1.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ContractViolation("image size must be positive")
        object.__setattr__(self, "k", np.array(self.k, dtype=float).reshape(6))
        object.__setattr__(self, "p", np.array(self.p, dtype=float).reshape(2))
        object.__setattr__(self, "R_CI", np.array(self.R_CI, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t_CI", np.array(self.t_CI, dtype=float).reshape(3))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return bool(np.any(self.k != 0.0) or np.any(self.p != 0.0))

    def undistorted(self) -> "CameraModel":
        return CameraModel(
            self.fx, self.fy, self.cx, self.cy, self.width, self.height,
            R_CI=self.R_CI, t_CI=self.t_CI, sigma_px=self.sigma_px,
        )

    def in_image(self, px: np.ndarray) -> bool:
        return bool(0.0 <= px[0] < self.width and 0.0 <= px[1] < self.height)


@dataclass
class Landmark:
    """A 3D point, either Euclidean in the world or anchored inverse depth."""

    id: int
    position: np.ndarray | None = None
    anchor_frame: int | None = None
    bearing: np.ndarray | None = None
    rho: float | None = None

    def __post_init__(self):
        if self.position is not None:
            self.position = np.asarray(self.position, dtype=float).reshape(3)
        elif self.bearing is not None:
            b = np.asarray(self.bearing, dtype=float).reshape(3)
            self.bearing = b / np.linalg.norm(b)
            if self.rho is None or not self.rho > 0.0:
                raise InvalidDepth(f"inverse depth must be positive, got {self.rho}")
        else:
            raise ContractViolation("landmark needs a position or an anchored bearing")

    @property
    def is_idp(self) -> bool:
        return self.position is None

    def to_world(self, anchor_state: ImuState | None, model: CameraModel) -> np.ndarray:
        if not self.is_idp:
            return self.position
        if anchor_state is None:
            raise ContractViolation("IDP landmark needs its anchor state")
        return inverse_transform(anchor_state, self.bearing / self.rho, model)


@dataclass(frozen=True)
class FeatureObservation:
    frame_id: int
    landmark_id: int
    pixel: np.ndarray
    sigma_px: float = 1.0


def transform_to_camera(state: ImuState, L_W: np.ndarray, model: CameraModel) -> np.ndarray:
    return model.R_CI @ (state.R.T @ (np.asarray(L_W, dtype=float) - state.t)) + model.t_CI


def inverse_transform(state: ImuState, L_C: np.ndarray, model: CameraModel) -> np.ndarray:
    return state.R @ (model.R_CI.T @ (np.asarray(L_C, dtype=float) - model.t_CI)) + state.t


def project(L_C: np.ndarray) -> np.ndarray:
    if not L_C[2] > Z_MIN:
        raise PointNotVisible(f"point at depth {L_C[2]:.3g} is not in front of the camera")
    return np.array([L_C[0] / L_C[2], L_C[1] / L_C[2]])


def distort(z_p: np.ndarray, model: CameraModel) -> np.ndarray:
    """Rational radial plus tangential distortion on the unit plane."""
    x, y = z_p
    k1, k2, k3, k4, k5, k6 = model.k
    p1, p2 = model.p
    r2 = x * x + y * y
    radial = (1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2) / (
        1.0 + k4 * r2 + k5 * r2 * r2 + k6 * r2 * r2 * r2
    )
    return np.array(
        [
            radial * x + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            radial * y + 2.0 * p2 * x * y + p1 * (r2 + 2.0 * y * y),
        ]
    )


def apply_intrinsics(z_d: np.ndarray, model: CameraModel) -> np.ndarray:
    return np.array([model.fx * z_d[0] + model.cx, model.fy * z_d[1] + model.cy])


def remove_intrinsics(px: np.ndarray, model: CameraModel) -> np.ndarray:
    return np.array([(px[0] - model.cx) / model.fx, (px[1] - model.cy) / model.fy])


def undistort_point(z_d: np.ndarray, model: CameraModel, iters: int = 10, tol: float = 1e-10):
    """Fixed-point inversion of :func:`distort`."""
    z = np.array(z_d, dtype=float)
    for _ in range(iters):
        step = distort(z, model) - z_d
        z = z - step
        if abs(step[0]) < tol and abs(step[1]) < tol:
            break
    return z


def undistort_pixel(px: np.ndarray, model: CameraModel, iters: int = 10, tol: float = 1e-10):
    if not model.has_distortion:
        return np.asarray(px, dtype=float)
    z = undistort_point(remove_intrinsics(px, model), model, iters, tol)
    return apply_intrinsics(z, model)


def observe(
    state: ImuState,
    L_W: np.ndarray,
    model: CameraModel,
    distorted: bool = False,
    require_in_image: bool = False,
) -> np.ndarray:
    """Noise-free predicted pixel of a world landmark."""
    z = project(transform_to_camera(state, L_W, model))
    if distorted:
        z = distort(z, model)
    px = apply_intrinsics(z, model)
    if require_in_image and not model.in_image(px):
        raise OutOfImage(f"pixel ({px[0]:.2f}, {px[1]:.2f}) outside {model.width}x{model.height} image")
    return px


def is_visible(state: ImuState, L_W: np.ndarray, model: CameraModel, distorted: bool = True) -> bool:
    try:
        observe(state, L_W, model, distorted=distorted, require_in_image=True)
    except PointNotVisible:
        return False
    return True


def observe_jacobians(state: ImuState, L_W: np.ndarray, model: CameraModel):
    """Undistorted pixel with its Jacobians.

    Returns ``(px, J_state, J_landmark)`` where ``J_state`` is 2x15 with respect
    to ``state ⊕ delta`` (only the position and rotation blocks are nonzero).
    """
    R = state.R
    L_I = R.T @ (np.asarray(L_W, dtype=float) - state.t)
    L_C = model.R_CI @ L_I + model.t_CI
    x, y, z = L_C
    if not z > Z_MIN:
        raise PointNotVisible(f"point at depth {z:.3g} is not in front of the camera")
    iz = 1.0 / z
    px = np.array([model.fx * x * iz + model.cx, model.fy * y * iz + model.cy])
    d_proj = np.array(
        [[model.fx * iz, 0.0, -model.fx * x * iz * iz], [0.0, model.fy * iz, -model.fy * y * iz * iz]]
    )
    J_L = d_proj @ model.R_CI @ R.T
    J_x = np.zeros((2, 15))
    J_x[:, 0:3] = -J_L
    J_x[:, 3:6] = d_proj @ model.R_CI @ mf.skew(L_I)
    return px, J_x, J_L


def back_project_ray(px: np.ndarray, model: CameraModel) -> np.ndarray:
    """Bearing ``K^-1 [u, v, 1]`` with unit z component."""
    return np.array([(px[0] - model.cx) / model.fx, (px[1] - model.cy) / model.fy, 1.0])


def back_project_idp(px: np.ndarray, rho: float, model: CameraModel) -> np.ndarray:
    """Camera-frame point at distance ``1/rho`` along the pixel's ray."""
    if not rho > 0.0:
        raise InvalidDepth(f"inverse depth must be positive, got {rho}")
    m = back_project_ray(px, model)
    return m / (np.linalg.norm(m) * rho)


def idp_to_homogeneous(bearing: np.ndarray, rho: float) -> np.ndarray:
    """Homogeneous 4-vector ``(m_x, m_y, m_z, rho)`` of an anchored point."""
    return np.concatenate([np.asarray(bearing, dtype=float), [rho]])


def homogeneous_to_euclidean(h: np.ndarray) -> np.ndarray:
    if not h[3] > 0.0:
        raise InvalidDepth("homogeneous point at infinity or behind the anchor")
    return h[:3] / h[3]


def _bearing_angle(a: np.ndarray, b: np.ndarray) -> float:
    # atan2 form of arccos(a.b / |a||b|): exact zero for parallel vectors
    return math.atan2(float(np.linalg.norm(np.cross(a, b))), float(a @ b))


def geometric_residual(
    metric: str, z_meas: np.ndarray, state: ImuState, L_W: np.ndarray, model: CameraModel
) -> np.ndarray:
    """Measurement-minus-prediction residual in one of four metrics.

    ``image_plane`` (2, pixels), ``unit_plane`` (2), ``unit_bearing`` (3) and
    ``bearing_angle`` (1, radians).
    """
    if metric not in METRICS:
        raise ContractViolation(f"unknown metric {metric!r}; expected one of {METRICS}")
    L_C = transform_to_camera(state, L_W, model)
    m = back_project_ray(z_meas, model)
    if metric == "image_plane":
        return np.asarray(z_meas, dtype=float) - apply_intrinsics(project(L_C), model)
    if metric == "unit_plane":
        return m[:2] / m[2] - project(L_C)
    if metric == "unit_bearing":
        return m / np.linalg.norm(m) - L_C / np.linalg.norm(L_C)
    return np.array([_bearing_angle(m, L_C)])


def warp(
    px: np.ndarray, rho: float, state_k1: ImuState, state_k2: ImuState, model: CameraModel,
    require_in_image: bool = True,
) -> np.ndarray:
    """Pixel in frame k2 of the point seen at ``px`` with inverse depth ``rho`` in k1."""
    L_W = inverse_transform(state_k1, back_project_idp(px, rho, model), model)
    return observe(state_k2, L_W, model, require_in_image=require_in_image)


class IntensityField:
    """Image intensity with bilinear interpolation on pixel centres.

    Pixel ``(u, v)`` samples ``image[int(v), int(u)]`` at integer coordinates;
    the domain is ``[0, width-1] x [0, height-1]``.
    """

    def __init__(self, image: np.ndarray):
        self.image = np.asarray(image, dtype=float)
        self.height, self.width = self.image.shape

    @classmethod
    def render(cls, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], width: int, height: int):
        u, v = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
        return cls(fn(u, v))

    def contains(self, px: np.ndarray) -> bool:
        return bool(0.0 <= px[0] <= self.width - 1 and 0.0 <= px[1] <= self.height - 1)

    def __call__(self, px: np.ndarray) -> float:
        if not self.contains(px):
            raise ResidualUndefined(f"pixel {px} outside intensity domain")
        u, v = float(px[0]), float(px[1])
        u0 = min(int(u), self.width - 2)
        v0 = min(int(v), self.height - 2)
        du, dv = u - u0, v - v0
        I = self.image
        return float(
            (1 - du) * (1 - dv) * I[v0, u0]
            + du * (1 - dv) * I[v0, u0 + 1]
            + (1 - du) * dv * I[v0 + 1, u0]
            + du * dv * I[v0 + 1, u0 + 1]
        )


def photometric_residual(
    px: np.ndarray,
    rho: float,
    state_k1: ImuState,
    state_k2: ImuState,
    I_k1: IntensityField,
    I_k2: IntensityField,
    model: CameraModel,
) -> float:
    """Pixel-wise intensity difference ``I_k1(px) - I_k2(warp(px))``."""
    if not I_k1.contains(px):
        raise ContractViolation(f"pixel {px} outside the source intensity domain")
    try:
        target = warp(px, rho, state_k1, state_k2, model, require_in_image=False)
    except PointNotVisible as exc:
        raise ResidualUndefined(str(exc)) from exc
    return I_k1(px) - I_k2(target)


def render_plane_scene(
    state: ImuState,
    model: CameraModel,
    texture: Callable[[np.ndarray, np.ndarray], np.ndarray],
    plane_z: float,
) -> tuple[IntensityField, np.ndarray]:
    """Render a textured horizontal plane ``z = plane_z`` into an intensity field.

    ``texture(x, y)`` gives intensity at world coordinates.  Also returns the
    per-pixel inverse depth (NaN where the ray misses the plane).
    """
    u, v = np.meshgrid(np.arange(model.width, dtype=float), np.arange(model.height, dtype=float))
    rays_c = np.stack([(u - model.cx) / model.fx, (v - model.cy) / model.fy, np.ones_like(u)], -1)
    R_WC = state.R @ model.R_CI.T
    origin = inverse_transform(state, np.zeros(3), model)
    rays_w = rays_c @ R_WC.T
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (plane_z - origin[2]) / rays_w[..., 2]
    hit = s > 0
    pts = origin + rays_w * s[..., None]
    img = np.where(hit, texture(pts[..., 0], pts[..., 1]), 0.0)
    dist = np.linalg.norm(rays_w, axis=-1) * s
    rho = np.where(hit, 1.0 / dist, np.nan)
    return IntensityField(img), rho
