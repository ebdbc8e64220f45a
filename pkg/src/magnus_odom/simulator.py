"""Synthetic ground truth, landmark worlds and radar scans.

Motion profiles are written in physical terms: the vehicle's own body
velocity and acceleration (x forward, y left, z up).  The estimator state
holds ``T_vi`` (world -> vehicle), whose generator ``dT_vi/dt = w^ T_vi``
uses the opposite sign, so profiles are negated once when converted.

Ground truth is integrated with the fine-step RK4 oracle, never with the
Magnus propagation used by the estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _jit
from .measurement import (
    DEG,
    RadarScan,
    SensorModel,
    polar_from_cart,
    radial_velocity_pred,
    wrap_angle,
)
from .prior import State
from .se3 import Pose

FRAME_RATE = 13.0
SUBSTEPS_PER_FRAME = 1000
SENSOR_MOUNT = np.array([3.7, 0.0, 0.5])  # sensor position in the vehicle frame

# truth_ids labels for non-landmark detections
CLUTTER = -1
DYNAMIC = -2


# --------------------------------------------------------------------------- #
# motion profiles and trajectories
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class MotionProfile:
    """Piecewise-constant body acceleration, in the estimator's sign convention."""

    segments: tuple[tuple[float, tuple[float, ...]], ...]
    initial: State = field(default_factory=State.identity)

    def __post_init__(self):
        for dur, acc in self.segments:
            if not dur > 0:
                raise ValueError("segment durations must be positive")
            if len(acc) != 6:
                raise ValueError("segment accelerations must be 6-vectors")

    @property
    def duration(self) -> float:
        return float(sum(d for d, _ in self.segments))

    @classmethod
    def from_physical(cls, segments, velocity=(0, 0, 0, 0, 0, 0)) -> MotionProfile:
        segs = tuple((float(d), tuple(-float(a) for a in acc)) for d, acc in segments)
        v = -np.asarray(velocity, dtype=float)
        return cls(segs, State(Pose.identity(), v, np.asarray(segs[0][1], dtype=float) if segs else np.zeros(6)))

    def acceleration_at(self, t: float) -> np.ndarray:
        acc_t = 0.0
        for dur, acc in self.segments:
            if t < acc_t + dur:
                return np.asarray(acc, dtype=float)
            acc_t += dur
        return np.asarray(self.segments[-1][1], dtype=float)


def gen_trajectory(
    profile: MotionProfile, frame_rate: float = FRAME_RATE, substeps: int = SUBSTEPS_PER_FRAME
) -> list[State]:
    """Ground-truth states at ``k / frame_rate`` for ``k < floor(duration * frame_rate)``.

    Each frame interval is integrated with RK4 at ``substeps`` steps, split
    at segment boundaries so every piece has constant acceleration.
    """
    n = int(math.floor(profile.duration * frame_rate + 1e-9))
    bounds = np.cumsum([0.0] + [d for d, _ in profile.segments])
    accs = [np.asarray(a, dtype=float) for _, a in profile.segments]
    t_mat = profile.initial.pose.matrix()
    w = profile.initial.velocity.astype(float).copy()
    states = []
    t = 0.0
    seg = 0
    for k in range(n):
        stamp = k / frame_rate
        while seg < len(accs) - 1 and stamp >= bounds[seg + 1] - 1e-12:
            seg += 1
        states.append(State(Pose.from_matrix(t_mat), w.copy(), accs[seg].copy(), stamp))
        if k == n - 1:
            break
        t_end = (k + 1) / frame_rate
        t = stamp
        while t < t_end - 1e-15:
            while seg < len(accs) - 1 and t >= bounds[seg + 1] - 1e-12:
                seg += 1
            stop = min(t_end, bounds[seg + 1]) if seg < len(accs) - 1 else t_end
            h = stop - t
            steps = max(1, int(round(substeps * h * frame_rate)))
            t_mat = _jit.rk4_pose(t_mat, w, accs[seg], h, steps)
            w = w + h * accs[seg]
            t = stop
    return states


class _Builder:
    """Accumulates physical-frame segments while tracking the current velocity."""

    def __init__(self, speed: float = 0.0):
        self.v = np.array([speed, 0, 0, 0, 0, 0], dtype=float)
        self.v0 = self.v.copy()
        self.segments: list[tuple[float, np.ndarray]] = []

    def _seg(self, dur: float, acc) -> _Builder:
        acc = np.asarray(acc, dtype=float)
        self.segments.append((dur, acc))
        self.v = self.v + dur * acc
        return self

    def hold(self, dur: float) -> _Builder:
        return self._seg(dur, np.zeros(6))

    def speed_to(self, target: float, accel: float) -> _Builder:
        dv = target - self.v[0]
        if abs(dv) < 1e-12:
            return self
        acc = np.zeros(6)
        acc[0] = math.copysign(accel, dv)
        return self._seg(abs(dv) / accel, acc)

    def wave(self, amps: dict[int, float], ramp: float) -> _Builder:
        """Rate pattern +a, -a, -a, +a on the given axes; the angle peaks at ``amp`` and returns to zero."""
        a = np.zeros(6)
        for axis, amp in amps.items():
            a[axis] = amp / ramp**2
        return self._seg(ramp, a)._seg(2 * ramp, -a)._seg(ramp, a)

    def turn(self, angle: float, rate: float = 0.25, ramp: float = 1.0) -> _Builder:
        hold = abs(angle) / rate - ramp
        a = np.zeros(6)
        a[5] = math.copysign(rate / ramp, angle)
        self._seg(ramp, a)
        if hold > 0:
            self.hold(hold)
        return self._seg(ramp, -a)

    def lane_change(self, width: float, ramp: float = 1.0) -> _Builder:
        # heading integral of the yaw wave is 2 a ramp^3 (small-angle)
        a = width / (2.0 * self.v[0] * ramp**3)
        return self.wave({5: a * ramp**2}, ramp)

    def hill(self, pitch: float, roll: float = 0.0, ramp: float = 1.5) -> _Builder:
        """Nose-up for ``pitch > 0`` (rotation about +y pitches the nose down)."""
        return self.wave({4: -pitch, 3: roll}, ramp)

    def profile(self) -> MotionProfile:
        return MotionProfile.from_physical([(d, a) for d, a in self.segments], self.v0)


def vehicle_positions(states: list[State]) -> np.ndarray:
    """World-frame vehicle origins ``-R^T t`` for ``T_vi = (R, t)``."""
    rot = np.array([s.pose.rotation for s in states])
    trans = np.array([s.pose.translation for s in states])
    return -np.einsum("nji,nj->ni", rot, trans)


def path_length(states: list[State]) -> float:
    p = vehicle_positions(states)
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


# --------------------------------------------------------------------------- #
# world
# --------------------------------------------------------------------------- #
@dataclass
class DynamicObject:
    """Box moving at constant world velocity, rendered as a small point cluster."""

    t_start: float
    t_end: float
    center: np.ndarray  # world position at t_start
    velocity: np.ndarray  # world velocity
    yaw: float  # box heading about world z
    half_extent: np.ndarray
    offsets: np.ndarray  # (n, 3) cluster points in the box frame

    def active(self, t: float) -> bool:
        return self.t_start <= t <= self.t_end

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def center_at(self, t: float) -> np.ndarray:
        return self.center + (t - self.t_start) * self.velocity

    def points_at(self, t: float) -> np.ndarray:
        return self.center_at(t) + self.offsets @ self.rotation().T

    def occludes(self, origin: np.ndarray, targets: np.ndarray, t: float) -> np.ndarray:
        """Slab test: does the segment origin -> target cross the box before the target?"""
        rot = self.rotation()
        o = (origin - self.center_at(t)) @ rot
        d = (targets - origin) @ rot
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-self.half_extent - o) * inv
            t2 = (self.half_extent - o) * inv
        lo = np.nanmax(np.minimum(t1, t2), axis=1)
        hi = np.nanmin(np.maximum(t1, t2), axis=1)
        return (lo <= hi) & (hi > 0.0) & (lo < 1.0 - 1e-9)


@dataclass
class WorldModel:
    landmarks: np.ndarray  # (N, 3) world points
    dynamic: list[DynamicObject] = field(default_factory=list)
    clutter_rate: float = 5.0
    detection_prob: float = 0.95
    clutter_speed: float = 5.0

    def __post_init__(self):
        if len(self.landmarks) == 0:
            raise ValueError("a world needs at least one landmark")
        if not 0.0 <= self.detection_prob <= 1.0:
            raise ValueError("detection probability must lie in [0, 1]")
        if self.clutter_rate < 0:
            raise ValueError("clutter rate must be non-negative")


def default_sensor(**overrides) -> SensorModel:
    return SensorModel(T_sv=Pose(np.eye(3), -SENSOR_MOUNT), **overrides)


def landmark_corridor(
    states: list[State],
    rng: np.random.Generator,
    density: float = 0.05,
    half_width: float = 20.0,
    road_half_width: float = 2.5,
    height=(0.0, 4.0),
    lead_in: float = 10.0,
    lead_out: float = 110.0,
) -> np.ndarray:
    """Uniform landmarks in a corridor around the path, extended straight past both ends."""
    pos = vehicle_positions(states)
    rot_iv = np.array([s.pose.rotation.T for s in states])
    seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1] + lead_in + lead_out
    n = int(rng.poisson(density * total * 2.0 * (half_width - road_half_width)))
    s = rng.uniform(-lead_in, cum[-1] + lead_out, n)
    side = rng.choice([-1.0, 1.0], n)
    lat = side * rng.uniform(road_half_width, half_width, n)
    up = rng.uniform(height[0], height[1], n)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(states) - 1)
    along = s - cum[k]
    local = np.column_stack([along, lat, up])
    return pos[k] + np.einsum("nij,nj->ni", rot_iv[k], local)


# --------------------------------------------------------------------------- #
# rendering
# --------------------------------------------------------------------------- #
def frame_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame)]))


def _sensor_origin_world(x: State, sensor: SensorModel) -> np.ndarray:
    t_si = sensor.T_sv @ x.pose
    return -t_si.rotation.T @ t_si.translation


def visible_landmarks(x: State, world: WorldModel, sensor: SensorModel) -> tuple[np.ndarray, np.ndarray]:
    """Indices of landmarks inside the field of view and not occluded, with their polar coordinates."""
    r_s = sensor.T_sv.act(x.pose.act(world.landmarks))
    rng_ = np.linalg.norm(r_s, axis=1)
    near = (rng_ >= sensor.r_min) & (rng_ <= sensor.r_max) & (r_s[:, 0] > 0)
    idx = np.flatnonzero(near)
    polar = polar_from_cart(r_s[idx])
    keep = sensor.in_fov(polar)
    idx, polar = idx[keep], polar[keep]
    active = [o for o in world.dynamic if o.active(x.stamp)]
    if active and len(idx):
        origin = _sensor_origin_world(x, sensor)
        blocked = np.zeros(len(idx), dtype=bool)
        for obj in active:
            blocked |= obj.occludes(origin, world.landmarks[idx], x.stamp)
        idx, polar = idx[~blocked], polar[~blocked]
    return idx, polar


def _dynamic_detections(x: State, obj: DynamicObject, sensor: SensorModel) -> np.ndarray:
    pts = obj.points_at(x.stamp)
    r_s = sensor.T_sv.act(x.pose.act(pts))
    polar = polar_from_cart(r_s)
    v_static = radial_velocity_pred(x, sensor, pts)
    # extra range rate from the object's own world velocity
    rot_si = sensor.T_sv.rotation @ x.pose.rotation
    unit = r_s / polar[:, :1]
    v_obj = unit @ (rot_si @ obj.velocity)
    out = np.column_stack([polar, v_static + v_obj])
    return out[sensor.in_fov(polar)]


def render_scan(
    x_true: State,
    world: WorldModel,
    sensor: SensorModel,
    seed: int,
    frame: int = 0,
    noise: bool = True,
) -> RadarScan:
    """One radar scan of the world seen from ``x_true``; deterministic in ``(seed, frame)``."""
    rng = frame_rng(seed, frame)
    idx, polar = visible_landmarks(x_true, world, sensor)
    keep = rng.random(len(idx)) < world.detection_prob
    idx, polar = idx[keep], polar[keep]
    v = radial_velocity_pred(x_true, sensor, world.landmarks[idx]) if len(idx) else np.zeros(0)
    det = np.column_stack([polar, v]) if len(idx) else np.zeros((0, 4))
    ids = idx.astype(np.int64)
    dyn = [_dynamic_detections(x_true, o, sensor) for o in world.dynamic if o.active(x_true.stamp)]
    dyn = [d for d in dyn if len(d)]
    if dyn:
        d = np.vstack(dyn)
        det = np.vstack([det, d])
        ids = np.concatenate([ids, np.full(len(d), DYNAMIC)])
    if noise:
        det = det + rng.standard_normal(det.shape) * np.asarray(sensor.sigma)
        n_clutter = int(rng.poisson(world.clutter_rate))
        if n_clutter:
            c = _clutter(rng, n_clutter, sensor, world.clutter_speed)
            det = np.vstack([det, c])
            ids = np.concatenate([ids, np.full(n_clutter, CLUTTER)])
        order = rng.permutation(len(det))
        det, ids = det[order], ids[order]
        det[:, 1] = wrap_angle(det[:, 1])
        det[:, 0] = np.abs(det[:, 0])
    return RadarScan(x_true.stamp, det, None, ids)


def _clutter(rng: np.random.Generator, n: int, sensor: SensorModel, speed: float) -> np.ndarray:
    lo, hi = sensor.r_min**3, sensor.r_max**3
    r = np.cbrt(rng.uniform(lo, hi, n))
    az = rng.uniform(-sensor.fov_azimuth, sensor.fov_azimuth, n)
    s = math.sin(sensor.fov_elevation)
    el = np.arcsin(rng.uniform(-s, s, n))
    return np.column_stack([r, az, el, rng.uniform(-speed, speed, n)])


# --------------------------------------------------------------------------- #
# scenarios
# --------------------------------------------------------------------------- #
@dataclass
class Scenario:
    name: str
    profile: MotionProfile
    sensor: SensorModel = field(default_factory=default_sensor)
    density: float = 0.05
    clutter_rate: float = 5.0
    detection_prob: float = 0.95
    description: str = ""


@dataclass
class Sequence:
    scenario: str
    seed: int
    ground_truth: list[State]
    world: WorldModel
    sensor: SensorModel
    scans: list[RadarScan]


def _urban() -> _Builder:
    b = _Builder(0.0)
    b.speed_to(12, 1.5).hold(8).turn(math.pi / 2, 0.3).hold(5)
    b.speed_to(0, 2.5).hold(3).speed_to(15, 2.0).hold(8)
    b.turn(-math.pi / 2, 0.25).speed_to(6, 2.0).turn(math.pi / 2, 0.4)
    b.speed_to(14, 1.5).hold(6).speed_to(3, 2.5).speed_to(12, 2.0).hold(6)
    return b


def _highway() -> _Builder:
    b = _Builder(25.0)
    b.hold(4).lane_change(3.5).hold(5).speed_to(28, 1.0).hold(2).lane_change(-3.5)
    b.hold(4).speed_to(22, 1.5).hold(3).lane_change(3.5, 1.2).hold(4).speed_to(25, 1.0).hold(3)
    return b


def _hilly() -> _Builder:
    b = _Builder(13.0)
    for i in range(4):
        b.hold(0.5).hill(5 * DEG, 3 * DEG * (-1) ** i).turn(math.pi / 2, 0.35).hill(-5 * DEG, -3 * DEG)
    return b


def _blockage() -> tuple[_Builder, float]:
    b = _Builder(0.0)
    b.speed_to(10, 1.5).hold(10).turn(math.pi / 2, 0.3).hold(6).speed_to(0, 2.0)
    t_stop = sum(d for d, _ in b.segments)
    b.hold(4).speed_to(12, 2.0).hold(10).turn(-math.pi / 2, 0.3).hold(8)
    b.speed_to(4, 2.0).hold(3).speed_to(13, 2.0).hold(12)
    return b, t_stop


def scenario_presets() -> dict[str, Scenario]:
    fig1 = MotionProfile.from_physical([(2.0, (0, 0, 0, 0, 0, 1.0))], (10, 0, 0, 0, 0, 0))
    blk, _ = _blockage()
    return {
        "straight_cruise": Scenario(
            "straight_cruise", _Builder(25.0).hold(34.0).profile(), description="25 m/s straight line"
        ),
        "urban_stop_go": Scenario("urban_stop_go", _urban().profile(), description="stops, starts and turns, 0-15 m/s"),
        "highway": Scenario("highway", _highway().profile(), description="25 m/s with lane changes"),
        "yaw_accel_fig1": Scenario("yaw_accel_fig1", fig1, description="pure yaw acceleration"),
        "blockage": Scenario("blockage", blk.profile(), description="stop at a crossing tram that fills the view"),
        "hilly_loop": Scenario("hilly_loop", _hilly().profile(), description="closed loop with pitch and roll"),
    }


_TRAJ_CACHE: dict[tuple, list[State]] = {}


def scenario_trajectory(sc: Scenario, frame_rate: float = FRAME_RATE) -> list[State]:
    key = (sc.name, sc.profile.segments, tuple(sc.profile.initial.velocity), frame_rate)
    if key not in _TRAJ_CACHE:
        _TRAJ_CACHE[key] = gen_trajectory(sc.profile, frame_rate)
    return _TRAJ_CACHE[key]


def _tram(states: list[State], t_stop: float, rng: np.random.Generator) -> DynamicObject:
    """30 m tram crossing left to right 7 m in front of the stopped sensor."""
    k = int(round(t_stop * FRAME_RATE))
    pose_iv = states[k].pose.inverse()
    fwd = pose_iv.rotation[:, 0]
    left = pose_iv.rotation[:, 1]
    sensor_pos = pose_iv.act(SENSOR_MOUNT)
    half = np.array([15.0, 1.3, 1.75])
    speed = 5.0
    # fully in front of the boresight 2.5 s after the stop
    t_mid = t_stop + 2.5
    mid = sensor_pos + (7.0 + half[1]) * fwd
    mid[2] = pose_iv.translation[2] + half[2]
    vel = -speed * left
    t0 = t_mid - 5.0
    n = int(rng.integers(3, 9))
    offsets = np.column_stack(
        [rng.uniform(-half[0], half[0], n), np.full(n, -half[1]), rng.uniform(-half[2], half[2], n)]
    )
    # box x axis along the direction of travel, -y face toward the sensor
    yaw = math.atan2(vel[1], vel[0])
    return DynamicObject(t0, t_mid + 5.0, mid - 5.0 * vel, vel, yaw, half, offsets)


def build_world(sc: Scenario, states: list[State], seed: int, noise: bool = True) -> WorldModel:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    marks = landmark_corridor(states, rng, sc.density)
    dynamic = []
    if sc.name == "blockage":
        _, t_stop = _blockage()
        dynamic.append(_tram(states, t_stop, rng))
    return WorldModel(
        marks,
        dynamic,
        clutter_rate=sc.clutter_rate if noise else 0.0,
        detection_prob=sc.detection_prob if noise else 1.0,
    )


def simulate(name: str | Scenario, seed: int = 0, noise: bool = True, sensor: SensorModel | None = None) -> Sequence:
    presets = scenario_presets()
    if isinstance(name, Scenario):
        sc = name
    elif name in presets:
        sc = presets[name]
    else:
        raise KeyError(f"unknown scenario {name!r}; valid: {', '.join(sorted(presets))}")
    if sensor is not None:
        sc = replace(sc, sensor=sensor)
    states = scenario_trajectory(sc)
    world = build_world(sc, states, seed, noise)
    scans = [render_scan(x, world, sc.sensor, seed, k, noise) for k, x in enumerate(states)]
    return Sequence(sc.name, seed, states, world, sc.sensor, scans)
