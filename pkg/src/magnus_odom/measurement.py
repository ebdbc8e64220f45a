"""Radar measurement models: polar ``[r, azimuth, elevation, radial velocity]``
and the Cartesian ``[x, y, z, radial velocity]`` baseline.

Frames: the state pose is ``T_vi`` (world -> vehicle) and the extrinsic
``T_sv`` maps vehicle to sensor coordinates, so a world point lands in the
sensor frame at ``r_s = T_sv T_vi p``.  With ``dT_vi/dt = w^ T_vi``, a
static point moves in the vehicle frame as ``dr_v/dt = omega x r_v + nu``
and the radial velocity is the range rate ``d|r_s|/dt``.  Approaching a
point therefore gives a negative radial velocity.

All functions are vectorized over a leading point axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindSensorError, DegeneratePointError, GimbalError
from .prior import State
from .se3 import Pose, hat3

DEG = np.pi / 180.0
MIN_RANGE = 1e-6
GIMBAL_MARGIN = 1e-9


@dataclass(frozen=True)
class SensorModel:
    T_sv: Pose = field(default_factory=Pose.identity)
    fov_azimuth: float = 50.0 * DEG
    fov_elevation: float = 15.0 * DEG
    r_min: float = 1.0
    r_max: float = 100.0
    # 1-sigma range (m), azimuth (rad), elevation (rad), radial velocity (m/s)
    sigma: tuple[float, float, float, float] = (0.02, 0.15 * DEG, 0.3 * DEG, 0.01)
    # per-axis Cartesian sigma (sensor frame) used only by the baseline model
    sigma_cartesian: tuple[float, float, float] = (0.05, 0.15, 0.25)
    frame_rate: float = 13.0

    def __post_init__(self):
        if not self.r_min < self.r_max:
            raise ValueError("r_min must be smaller than r_max")
        if min(self.sigma) <= 0 or min(self.sigma_cartesian) <= 0:
            raise ValueError("noise standard deviations must be positive")

    @property
    def polar_cov(self) -> np.ndarray:
        return np.diag(np.square(self.sigma))

    @property
    def cartesian_cov(self) -> np.ndarray:
        return np.diag(np.square(list(self.sigma_cartesian) + [self.sigma[3]]))

    def in_fov(self, polar: np.ndarray) -> np.ndarray:
        polar = np.atleast_2d(polar)
        return (
            (polar[:, 0] >= self.r_min)
            & (polar[:, 0] <= self.r_max)
            & (np.abs(polar[:, 1]) <= self.fov_azimuth)
            & (np.abs(polar[:, 2]) <= self.fov_elevation)
        )


@dataclass(frozen=True)
class MapPoint:
    position: np.ndarray  # homogeneous world point, last entry 1
    id: int = 0
    hits: int = 1
    last_seen: int = 0

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        if p.shape != (4,) or p[3] != 1.0 or not np.all(np.isfinite(p)):
            raise ValueError("MapPoint.position must be a finite homogeneous 4-vector with w = 1")


@dataclass(frozen=True)
class RadarDetection:
    range: float
    azimuth: float
    elevation: float
    radial_velocity: float
    noise_cov: np.ndarray | None = None

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError("range must be positive")
        if not -np.pi < self.azimuth <= np.pi:
            raise ValueError("azimuth must lie in (-pi, pi]")
        if not abs(self.elevation) < np.pi / 2:
            raise ValueError("elevation must lie in (-pi/2, pi/2)")

    def as_array(self) -> np.ndarray:
        return np.array([self.range, self.azimuth, self.elevation, self.radial_velocity])


@dataclass
class RadarScan:
    """Detections ``(N, 4)`` as ``[r, theta, phi, v]`` plus optional per-detection covariances."""

    stamp: float
    detections: np.ndarray
    covariances: np.ndarray | None = None
    # simulator ground truth: landmark id per detection, -1 for clutter, -2 dynamic
    truth_ids: np.ndarray | None = None

    def __post_init__(self):
        self.detections = np.asarray(self.detections, dtype=float).reshape(-1, 4)

    def __len__(self) -> int:
        return self.detections.shape[0]

    def detection(self, i: int) -> RadarDetection:
        cov = None if self.covariances is None else self.covariances[i]
        return RadarDetection(*self.detections[i], noise_cov=cov)


def _points3(p) -> np.ndarray:
    if isinstance(p, MapPoint):
        p = p.position
    p = np.asarray(p, dtype=float)
    if p.shape[-1] == 4:
        return p[..., :3] / p[..., 3:4]
    return p


# --------------------------------------------------------------------------- #
# geometry
# --------------------------------------------------------------------------- #
def vehicle_points(x: State, p) -> np.ndarray:
    return x.pose.act(_points3(p))


def points_in_sensor(x: State, sensor: SensorModel, p) -> np.ndarray:
    """``r_s = D T_sv T_vi p`` without degeneracy checks."""
    return sensor.T_sv.act(vehicle_points(x, p))


def point_in_sensor(x: State, sensor: SensorModel, p) -> np.ndarray:
    r_s = points_in_sensor(x, sensor, p)
    if np.any(np.linalg.norm(np.atleast_2d(r_s), axis=-1) < MIN_RANGE):
        raise BehindSensorError("map point coincides with the sensor origin")
    return r_s


def polar_from_cart(r: np.ndarray) -> np.ndarray:
    """``[|r|, atan2(y, x), asin(z / |r|)]``."""
    r = np.asarray(r, dtype=float)
    rng = np.linalg.norm(r, axis=-1)
    if np.any(rng < MIN_RANGE):
        raise DegeneratePointError("cannot convert the origin to polar coordinates")
    el = np.arcsin(np.clip(r[..., 2] / rng, -1.0, 1.0))
    if np.any(np.abs(el) > np.pi / 2 - GIMBAL_MARGIN):
        raise GimbalError("elevation too close to +-pi/2")
    return np.stack([rng, np.arctan2(r[..., 1], r[..., 0]), el], axis=-1)


def cart_from_polar(polar: np.ndarray) -> np.ndarray:
    polar = np.asarray(polar, dtype=float)
    r, th, el = polar[..., 0], polar[..., 1], polar[..., 2]
    ce = np.cos(el)
    return np.stack([r * ce * np.cos(th), r * ce * np.sin(th), r * np.sin(el)], axis=-1)


def polar_jacobian(r: np.ndarray) -> np.ndarray:
    """``d s(r) / d r`` for Cartesian-to-polar conversion, shape ``(..., 3, 3)``."""
    r = np.asarray(r, dtype=float)
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    n2 = x * x + y * y + z * z
    n = np.sqrt(n2)
    rho2 = x * x + y * y
    rho = np.sqrt(rho2)
    out = np.empty(r.shape[:-1] + (3, 3))
    out[..., 0, :] = r / n[..., None]
    out[..., 1, 0] = -y / rho2
    out[..., 1, 1] = x / rho2
    out[..., 1, 2] = 0.0
    out[..., 2, 0] = -z * x / (n2 * rho)
    out[..., 2, 1] = -z * y / (n2 * rho)
    out[..., 2, 2] = rho / n2
    return out


def radial_velocity_pred(x: State, sensor: SensorModel, p) -> np.ndarray:
    """Range rate of static world points seen from the moving sensor."""
    r_v = vehicle_points(x, p)
    r_s = sensor.T_sv.act(r_v)
    rng = np.linalg.norm(r_s, axis=-1)
    if np.any(rng < MIN_RANGE):
        raise DegeneratePointError("radial velocity undefined at the sensor origin")
    u_v = np.cross(x.velocity[3:], r_v) + x.velocity[:3]
    u_s = u_v @ sensor.T_sv.rotation.T
    return np.sum(r_s * u_s, axis=-1) / rng


def predict_detection(x: State, sensor: SensorModel, p) -> np.ndarray:
    """Noise-free ``[r, theta, phi, v]``."""
    r_s = point_in_sensor(x, sensor, p)
    polar = polar_from_cart(r_s)
    v = radial_velocity_pred(x, sensor, p)
    return np.concatenate([polar, np.asarray(v)[..., None]], axis=-1)


def _kinematic_parts(x: State, sensor: SensorModel, p):
    r_v = vehicle_points(x, p)
    if r_v.ndim == 1:
        r_v = r_v[None, :]
    rsv = sensor.T_sv.rotation
    r_s = r_v @ rsv.T + sensor.T_sv.translation
    n = r_v.shape[0]
    # d r_v / d xi = [I, -r_v^]
    jv = np.zeros((n, 3, 6))
    jv[:, :, :3] = np.eye(3)
    jv[:, :, 3:] = -hat3(r_v)
    js = rsv @ jv  # d r_s / d xi
    rng = np.linalg.norm(r_s, axis=-1)
    if np.any(rng < MIN_RANGE):
        raise DegeneratePointError("Jacobian undefined at the sensor origin")
    unit = r_s / rng[:, None]
    omega, nu = x.velocity[3:], x.velocity[:3]
    u_s = (np.cross(omega, r_v) + nu) @ rsv.T
    # d v / d xi: through the direction and through u
    proj = (u_s - np.sum(u_s * unit, axis=-1)[:, None] * unit) / rng[:, None]
    dv_dxi = np.einsum("ni,nij->nj", proj, js) + np.einsum("ni,ij,njk->nk", unit, rsv @ hat3(omega), jv)
    dv_deta = np.einsum("ni,nij->nj", unit @ rsv, jv)
    v = np.sum(unit * u_s, axis=-1)
    return r_s, js, v, dv_dxi, dv_deta


def measurement_jacobian(x: State, sensor: SensorModel, p, dim: int = 18):
    """Prediction ``(N, 4)`` and Jacobian ``(N, 4, dim)`` of the polar model."""
    r_s, js, v, dv_dxi, dv_deta = _kinematic_parts(x, sensor, p)
    polar = polar_from_cart(r_s)
    g = np.zeros((r_s.shape[0], 4, dim))
    g[:, :3, :6] = polar_jacobian(r_s) @ js
    g[:, 3, :6] = dv_dxi
    g[:, 3, 6:12] = dv_deta
    pred = np.concatenate([polar, v[:, None]], axis=-1)
    return pred, g


def cartesian_model(x: State, sensor: SensorModel, p, dim: int = 18):
    """Sensor-frame Cartesian position ``(N, 3)`` and its Jacobian ``(N, 3, dim)``."""
    r_v = vehicle_points(x, p)
    r_v = np.atleast_2d(r_v)
    rsv = sensor.T_sv.rotation
    r_s = r_v @ rsv.T + sensor.T_sv.translation
    g = np.zeros((r_v.shape[0], 3, dim))
    g[:, :, :3] = rsv
    g[:, :, 3:6] = -rsv @ hat3(r_v)
    return r_s, g


def cartesian_measurement_jacobian(x: State, sensor: SensorModel, p, dim: int = 18):
    """Baseline prediction ``[x, y, z, v]`` ``(N, 4)`` and Jacobian ``(N, 4, dim)``."""
    r_s, js, v, dv_dxi, dv_deta = _kinematic_parts(x, sensor, p)
    g = np.zeros((r_s.shape[0], 4, dim))
    g[:, :3, :6] = js
    g[:, 3, :6] = dv_dxi
    g[:, 3, 6:12] = dv_deta
    return np.concatenate([r_s, v[:, None]], axis=-1), g


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def polar_residual(z: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """``z - g`` with the azimuth difference wrapped to ``[-pi, pi)``."""
    e = np.asarray(z, dtype=float) - pred
    e[..., 1] = wrap_angle(e[..., 1])
    return e


def detections_to_cartesian(det: np.ndarray) -> np.ndarray:
    """``[r, theta, phi, v]`` -> ``[x, y, z, v]`` (sensor frame)."""
    det = np.atleast_2d(det)
    return np.concatenate([cart_from_polar(det[:, :3]), det[:, 3:4]], axis=-1)
