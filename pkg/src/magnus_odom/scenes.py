"""Two-target association scenes under yaw acceleration.

Each scene starts from a true state with angular acceleration about the
vertical axis and an estimate of it drawn from a posterior covariance.  One
frame later a map point is observed together with a distractor, a moving
object in the same resolution cell whose radial velocity differs by 5 to 30
cm/s.  The acceleration-aware and constant-velocity predictions share one
predicted covariance, so any difference in association comes from the mean.

Ground truth is integrated by the simulator's RK4 oracle.
"""

from __future__ import annotations

import numpy as np

from .association import InflationScene
from .measurement import DEG, SensorModel, cart_from_polar, predict_detection
from .prior import (
    State,
    StateGaussian,
    discretize,
    process_noise,
    propagate_nominal,
    propagate_nominal_cv,
    state_boxplus,
)
from .se3 import Pose
from .simulator import FRAME_RATE, MotionProfile, default_sensor, gen_trajectory

# 1-sigma of the previous-frame posterior: pose (m, rad), velocity, acceleration;
# rounded medians of the CA/P window posterior on urban_stop_go
POSTERIOR_SIGMA = np.array(
    [0.001, 0.002, 0.006, 0.0015, 0.0005, 0.0003, 0.006, 0.03, 0.045, 0.027, 0.011, 0.007]
    + [0.3, 0.5, 0.6, 0.35, 0.23, 0.2]
)


def _world_point(x: State, sensor: SensorModel, polar: np.ndarray) -> np.ndarray:
    p_s = cart_from_polar(polar[None, :3])[0]
    p_v = sensor.T_sv.inverse().act(p_s)
    return x.pose.inverse().act(p_v)


def inflation_scenes(
    n: int,
    seed: int = 0,
    sensor: SensorModel | None = None,
    yaw_accel: tuple[float, float] = (1.0, 3.0),
    speed: tuple[float, float] = (5.0, 15.0),
    q: np.ndarray | None = None,
    posterior_sigma: np.ndarray = POSTERIOR_SIGMA,
    doppler_offset: tuple[float, float] = (0.05, 0.3),
) -> list[InflationScene]:
    """``n`` seeded scenes; ``|yaw acceleration|`` is drawn uniformly from ``yaw_accel`` (rad/s^2).

    The previous-frame estimate is the truth perturbed by a draw from
    ``diag(posterior_sigma^2)``.
    """
    sensor = sensor or default_sensor()
    q = process_noise() if q is None else q
    dt = 1.0 / FRAME_RATE
    scenes = []
    for k in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k, 0xF163]))
        v = rng.uniform(*speed)
        yaw_rate = rng.uniform(-0.3, 0.3)
        wd_z = rng.choice([-1.0, 1.0]) * rng.uniform(*yaw_accel)
        # physical body velocity/acceleration, negated into the state convention
        wd = -np.array([0, 0, 0, 0, 0, wd_z])
        start = State(Pose.identity(), -np.array([v, 0, 0, 0, 0, yaw_rate]), wd)
        profile = MotionProfile(((2.0 * dt, tuple(wd)),), start)
        x0, truth = gen_trajectory(profile, FRAME_RATE)[:2]

        p0 = np.diag(np.asarray(posterior_sigma, dtype=float) ** 2)
        x0_hat = state_boxplus(rng.multivariate_normal(np.zeros(18), p0), x0)
        tr = discretize(x0_hat.velocity, x0_hat.acceleration, q, dt)
        ca = StateGaussian(propagate_nominal(x0_hat, dt), tr.F @ p0 @ tr.F.T + tr.Qk)
        cv = propagate_nominal_cv(x0_hat, dt)

        polar = np.array([rng.uniform(15.0, 50.0), rng.uniform(-30, 30) * DEG, rng.uniform(-3, 3) * DEG, 0.0])
        point = _world_point(truth, sensor, polar)
        z_true = np.atleast_2d(predict_detection(truth, sensor, point))[0]
        # distractor: a moving object in the same range/angle resolution cell,
        # separated only by a radial velocity offset
        sig = np.asarray(sensor.sigma)
        offset = sig * rng.standard_normal(4)
        offset[3] = rng.choice([-1.0, 1.0]) * rng.uniform(*doppler_offset)
        dets = np.stack([z_true + sig * rng.standard_normal(4), z_true + offset + sig * rng.standard_normal(4)])
        scenes.append(InflationScene(truth, cv, ca, point, dets, 0))
    return scenes
