"""Sliding-window radar odometry.

The window holds the ``K`` most recent states.  The cost is

    J = 1/2 |x_0 ⊖ x_prior|^2_Λ  +  Σ 1/2 |f(x_{k-1}) ⊖ x_k|^2_{Q_k^-1}  +  Σ ρ(|z - g(x_k, p)|_R)

with ``f`` the nominal propagation and ``ρ`` an optional Huber loss.  It is
minimized with Gauss-Newton on the manifold (left perturbations), and the
oldest state leaves the window through a Schur-complement prior on its
successor.

Two configurations are provided: CA/P (constant acceleration, polar
measurements) and the CV/C baseline (constant velocity, Cartesian positions
plus radial velocity).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _jit
from .association import (
    CARTESIAN,
    POLAR,
    AssignmentSet,
    AssociationConfig,
    MapPrediction,
    associate_prediction,
    joint_d2,
    joint_gate,
    noise_cov,
    predict_map,
    scan_measurements,
)
from .errors import DivergenceError, SingularSystemError
from .landmarks import LandmarkMap
from .measurement import (
    RadarScan,
    SensorModel,
    cart_from_polar,
    radial_velocity_pred,
)
from .prior import (
    CA_DIM,
    CV_DIM,
    DEFAULT_MAGNUS_ORDER,
    State,
    StateGaussian,
    discretize,
    discretize_cv,
    nominal_jacobian,
    process_noise,
    propagate_nominal,
    propagate_nominal_cv,
    state_boxminus,
    state_boxplus,
)
from .se3 import Pose, curlywedge, matfun_J, se3_exp, se3_left_jacobian_inv

# small association sets get a joint compatibility test; large ones are
# dominated by static structure and the test would cost O(n^3)
JOINT_TEST_MAX = 20

CONSTANT_ACCELERATION = "constant_acceleration"
CONSTANT_VELOCITY = "constant_velocity"


@dataclass(frozen=True)
class EstimatorConfig:
    window_size: int = 4
    max_gn_iters: int = 10
    gn_tol: float = 1e-6
    motion_model: str = CONSTANT_ACCELERATION
    measurement_model: str = POLAR
    # white-noise power spectral density (linear, angular) on jerk (CA) or acceleration (CV)
    process_noise: tuple[float, float] = (32.0, 4.0)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    robust_loss: str = "huber"
    huber_delta: float = 3.0
    prior_sigma: tuple[float, float, float] = (1e-2, 1.0, 1.0)  # pose, velocity, acceleration
    magnus_order: int = DEFAULT_MAGNUS_ORDER
    max_halvings: int = 5
    fov_margin: float = np.deg2rad(5.0)
    static_gate: float = 3.0  # sigmas of the radial-velocity consistency test
    stale_frames: int = 13  # unseen for this long -> first in line for eviction
    min_matches: int = 3  # fewer associations -> dropout frame, pure prediction
    restart_inliers: int = 30  # static Doppler consensus that marks an open view in a dropout frame
    bootstrap: str = "doppler"  # or "zero"

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if not (self.gn_tol > 0 and self.huber_delta > 0 and self.max_gn_iters >= 1):
            raise ValueError("tolerances must be positive")
        if self.motion_model not in (CONSTANT_ACCELERATION, CONSTANT_VELOCITY):
            raise ValueError(f"unknown motion model {self.motion_model!r}")
        if self.measurement_model not in (POLAR, CARTESIAN):
            raise ValueError(f"unknown measurement model {self.measurement_model!r}")
        if self.robust_loss not in ("none", "huber"):
            raise ValueError(f"unknown robust loss {self.robust_loss!r}")
        if self.bootstrap not in ("doppler", "zero"):
            raise ValueError(f"unknown bootstrap {self.bootstrap!r}")

    @property
    def dim(self) -> int:
        return CA_DIM if self.motion_model == CONSTANT_ACCELERATION else CV_DIM

    @property
    def Q(self) -> np.ndarray:
        return process_noise(*self.process_noise)

    def prior_cov(self) -> np.ndarray:
        s = np.repeat(np.square(self.prior_sigma), 6)
        return np.diag(s[: self.dim])


def configure_baseline_cv_c(cfg: EstimatorConfig | None = None, process_noise=(1.0, 0.2)) -> EstimatorConfig:
    """CV/C: 12-dim constant-velocity prior with the Cartesian measurement model."""
    cfg = cfg or EstimatorConfig()
    return replace(
        cfg,
        motion_model=CONSTANT_VELOCITY,
        measurement_model=CARTESIAN,
        process_noise=tuple(process_noise),
    )


# --------------------------------------------------------------------------- #
# cost terms
# --------------------------------------------------------------------------- #
def _pose_rows(jac_inv: np.ndarray, dim: int) -> np.ndarray:
    out = np.eye(dim)
    out[:6, :6] = jac_inv
    return out


def _propagate(x: State, dt: float, cfg: EstimatorConfig) -> State:
    if cfg.motion_model == CONSTANT_ACCELERATION:
        return propagate_nominal(x, dt, cfg.magnus_order)
    return propagate_nominal_cv(x, dt)


def cv_nominal_jacobian(x: State, dt: float) -> np.ndarray:
    """Derivative of ``exp(dt w^) T`` w.r.t. the 12-dim perturbation."""
    out = np.eye(CV_DIM)
    out[:6, :6] = se3_exp(dt * x.velocity).adjoint()
    out[:6, 6:] = dt * matfun_J(curlywedge(dt * x.velocity))
    return out


def motion_error(
    x_prev: State,
    x_curr: State,
    dt: float,
    F: np.ndarray | None = None,
    cfg: EstimatorConfig | None = None,
):
    """``e = f(x_prev) ⊖ x_curr`` with Jacobians w.r.t. both perturbations.

    ``F`` is the propagation Jacobian; by default the exact derivative of
    the nominal propagation is used.
    """
    cfg = cfg or EstimatorConfig()
    dim = cfg.dim
    pred = _propagate(x_prev, dt, cfg)
    e = state_boxminus(pred, x_curr, dim)
    if F is None:
        F = nominal_jacobian(x_prev, dt, cfg.magnus_order) if dim == CA_DIM else cv_nominal_jacobian(x_prev, dt)
    j_prev = _pose_rows(se3_left_jacobian_inv(e[:6]), dim) @ F[:dim, :dim]
    j_curr = -_pose_rows(se3_left_jacobian_inv(-e[:6]), dim)
    return e, j_prev, j_curr


@dataclass
class Observation:
    points: np.ndarray  # (N, 3) world positions of associated map points
    z: np.ndarray  # (N, 4) measurements in the model's space
    whiten: np.ndarray  # (N, 4, 4) inverse Cholesky factors of R
    map_ids: np.ndarray
    det_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.z)


@dataclass
class WindowProblem:
    states: list[State]
    prior_mean: State
    prior_info: np.ndarray
    qk_sqrt_info: list[np.ndarray]  # whitening for each interval
    dts: list[float]
    observations: list[Observation]


def measurement_terms(
    x: State,
    obs: Observation,
    sensor: SensorModel,
    cfg: EstimatorConfig,
    want_jac: bool = True,
    exact_loss: bool = True,
):
    """Robust cost of one frame's measurements and its 12x12 Gauss-Newton block."""
    return _jit.measurement_block(
        x.pose.rotation,
        x.pose.translation,
        x.velocity,
        sensor.T_sv.rotation,
        sensor.T_sv.translation,
        obs.points,
        obs.z,
        obs.whiten,
        cfg.measurement_model == POLAR,
        cfg.robust_loss == "huber",
        float(cfg.huber_delta),
        want_jac,
        exact_loss,
    )


def _prior_term(x0: State, prob: WindowProblem, dim: int):
    m = prob.prior_mean
    xi = _jit._relative_log(x0.pose.rotation, x0.pose.translation, m.pose.rotation, m.pose.translation)
    e = np.concatenate([xi, x0.velocity - m.velocity, x0.acceleration - m.acceleration])[:dim]
    return e, _pose_rows(_jit.se3_jl_inv(xi), dim)


def _motion_terms(states, prob: WindowProblem, cfg: EstimatorConfig, n_terms: int, H=None, g=None) -> float:
    """Whitened motion-prior cost; accumulates into ``H``/``g`` when given."""
    if n_terms < 1:
        return 0.0
    want = H is not None
    if not want:
        H = np.zeros((0, 0))
        g = np.zeros(0)
    return _jit.motion_blocks(
        np.array([x.pose.rotation for x in states]),
        np.array([x.pose.translation for x in states]),
        np.array([x.velocity for x in states]),
        np.array([x.acceleration for x in states]),
        np.asarray(prob.dts, dtype=float),
        np.asarray(prob.qk_sqrt_info),
        cfg.magnus_order,
        cfg.motion_model == CONSTANT_ACCELERATION,
        n_terms,
        want,
        H,
        g,
    )


def window_cost(prob: WindowProblem, sensor: SensorModel, cfg: EstimatorConfig, states=None) -> float:
    states = prob.states if states is None else states
    dim = cfg.dim
    e0, _ = _prior_term(states[0], prob, dim)
    cost = 0.5 * e0 @ prob.prior_info @ e0
    cost += _motion_terms(states, prob, cfg, len(states) - 1)
    for x, obs in zip(states, prob.observations):
        if len(obs):
            cost += measurement_terms(x, obs, sensor, cfg, False)[0]
    return float(cost)


def linearize(
    prob: WindowProblem, sensor: SensorModel, cfg: EstimatorConfig, terms: str = "all", exact_loss: bool = True
):
    """Gauss-Newton system ``(H, g, cost)`` at the current states.

    ``terms="departing"`` keeps only the factors that touch the oldest state
    (used for marginalization).  With ``exact_loss`` the Huber terms use the
    exact loss Hessian (quadratic convergence); otherwise plain reweighting.
    """
    dim = cfg.dim
    n = len(prob.states)
    H = np.zeros((n * dim, n * dim))
    g = np.zeros(n * dim)
    cost = 0.0
    e0, j0 = _prior_term(prob.states[0], prob, dim)
    H[:dim, :dim] += j0.T @ prob.prior_info @ j0
    g[:dim] += j0.T @ prob.prior_info @ e0
    cost += 0.5 * e0 @ prob.prior_info @ e0
    n_motion = min(1, n - 1) if terms == "departing" else n - 1
    cost += _motion_terms(prob.states, prob, cfg, n_motion, H, g)
    n_meas = 1 if terms == "departing" else n
    for k in range(n_meas):
        obs = prob.observations[k]
        if not len(obs):
            continue
        c, hk, gk = measurement_terms(prob.states[k], obs, sensor, cfg, True, exact_loss)
        cost += c
        s = slice(k * dim, k * dim + 12)
        H[s, s] += hk
        g[s] += gk
    return H, g, float(cost)


def _apply(states: list[State], delta: np.ndarray, dim: int) -> list[State]:
    out = []
    for k, x in enumerate(states):
        d = delta[k * dim : (k + 1) * dim]
        rot, trans = _jit.left_update(x.pose.rotation, x.pose.translation, d[:6])
        acc = x.acceleration + d[12:18] if dim == CA_DIM else x.acceleration
        out.append(State(Pose(rot, trans), x.velocity + d[6:12], acc, x.stamp))
    return out


@dataclass
class SolveResult:
    states: list[State]
    H: np.ndarray
    iterations: int
    costs: list[float]
    step_norms: list[float]


def _step(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        fac = cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("normal equations are not positive definite") from exc
    delta = -cho_solve(fac, g)
    if not np.all(np.isfinite(delta)):
        raise SingularSystemError("non-finite Gauss-Newton step")
    return delta


def _accept(new_cost: float, cost: float) -> bool:
    return new_cost <= cost * (1.0 + 1e-12) + 1e-12


def _halve(prob, sensor, cfg, states, delta, cost):
    """Backtrack by halving until the cost does not increase; ``None`` if it never does."""
    scale = 1.0
    for _ in range(cfg.max_halvings + 1):
        trial = _apply(states, scale * delta, cfg.dim)
        new_cost = window_cost(prob, sensor, cfg, trial)
        if _accept(new_cost, cost):
            return trial, new_cost, scale
        scale *= 0.5
    return None


# Marquardt damping schedule for the last-resort step
LM_DAMPING = 10.0 ** np.arange(-4, 9)


def _damped(prob, sensor, cfg, states, H, g, cost):
    """Solve ``(H + lam diag(H)) delta = -g`` for growing ``lam`` until the cost does not increase.

    Needed when the window is nearly unobservable (a blocked view leaves the
    accelerations constrained only by the prior): the undamped step then runs
    far along directions where the linearization is useless.
    """
    d = np.diag(np.maximum(np.diag(H), 1e-12 * np.max(np.diag(H))))
    delta = None
    for lam in LM_DAMPING:
        try:
            delta = _step(H + lam * d, g)
        except SingularSystemError:
            continue
        trial = _apply(states, delta, cfg.dim)
        new_cost = window_cost(prob, sensor, cfg, trial)
        if _accept(new_cost, cost):
            return (trial, new_cost, 1.0), delta
    return None, delta


def gauss_newton_solve(prob: WindowProblem, sensor: SensorModel, cfg: EstimatorConfig) -> SolveResult:
    """Gauss-Newton with step halving.

    Huber terms first use the exact loss Hessian; if no halving of that
    step reduces the cost, the iteration is retried with the reweighted
    Hessian (always at least as curved), then with Marquardt damping,
    before giving up.
    """
    states = list(prob.states)
    costs, steps = [], []
    it = 0
    for it in range(1, cfg.max_gn_iters + 1):
        prob.states = states
        H, g, cost = linearize(prob, sensor, cfg)
        if not costs:
            costs.append(cost)
        found = delta = None
        try:
            delta = _step(H, g)
            found = _halve(prob, sensor, cfg, states, delta, cost)
            if found is None and cfg.robust_loss == "huber":
                H, g, _ = linearize(prob, sensor, cfg, exact_loss=False)
                delta = _step(H, g)
                found = _halve(prob, sensor, cfg, states, delta, cost)
        except SingularSystemError:
            # a direction the window does not constrain; damping regularizes it
            H, g, _ = linearize(prob, sensor, cfg, exact_loss=False)
        if found is None:
            found, damped = _damped(prob, sensor, cfg, states, H, g, cost)
            if found is not None:
                delta = damped
        if found is None:
            if delta is None:
                raise SingularSystemError("normal equations are singular even with damping")
            step = float(np.linalg.norm(delta)) * 0.5**cfg.max_halvings
            if step < cfg.gn_tol:
                # numerically at the minimum: nothing left to gain
                steps.append(step)
                break
            raise DivergenceError(f"cost increased after {cfg.max_halvings} step halvings and damping")
        states, new_cost, scale = found
        costs.append(new_cost)
        steps.append(float(np.linalg.norm(scale * delta)))
        if steps[-1] < cfg.gn_tol:
            break
    prob.states = states
    H, _, _ = linearize(prob, sensor, cfg, exact_loss=False)
    return SolveResult(states, H, it, costs, steps)


def marginalize_oldest(prob: WindowProblem, sensor: SensorModel, cfg: EstimatorConfig) -> WindowProblem:
    """Drop ``x_0``; its factors become a Gaussian prior on ``x_1`` via the Schur complement."""
    dim = cfg.dim
    H, g, _ = linearize(prob, sensor, cfg, terms="departing", exact_loss=False)
    a, b = slice(0, dim), slice(dim, 2 * dim)
    haa = H[a, a]
    try:
        fac = cho_factor(haa)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("cannot marginalize the oldest state") from exc
    info = H[b, b] - H[b, a] @ cho_solve(fac, H[a, b])
    info = 0.5 * (info + info.T)
    grad = g[b] - H[b, a] @ cho_solve(fac, g[a])
    shift = -np.linalg.solve(info, grad)
    prior_mean = state_boxplus(shift, prob.states[1]) if np.any(shift) else prob.states[1]
    return WindowProblem(
        prob.states[1:],
        prior_mean,
        info,
        prob.qk_sqrt_info[1:],
        prob.dts[1:],
        prob.observations[1:],
    )


# --------------------------------------------------------------------------- #
# map maintenance
# --------------------------------------------------------------------------- #
def _static_sigma(det: np.ndarray, x: State, sensor: SensorModel) -> np.ndarray:
    """First-order std of ``v - v_static(direction)`` from radial-velocity and angular noise."""
    sig = np.asarray(sensor.sigma)
    u_s = sensor.T_sv.rotation @ x.velocity[:3]
    speed = np.linalg.norm(u_s) + np.linalg.norm(x.velocity[3:]) * det[:, 0]
    return np.sqrt(sig[3] ** 2 + (speed * sig[1]) ** 2 + (speed * sig[2]) ** 2)


def world_points(x: State, sensor: SensorModel, det: np.ndarray) -> np.ndarray:
    """Back-project detections ``[r, theta, phi, ...]`` into the world frame."""
    t_si = sensor.T_sv @ x.pose
    return t_si.inverse().act(cart_from_polar(np.atleast_2d(det)[:, :3]))


def backprojection_cov(x: State, sensor: SensorModel, det: np.ndarray, R: np.ndarray, model: str) -> np.ndarray:
    """World-frame covariance ``(N, 3, 3)`` of back-projected detections.

    ``R`` is the position block of the model's noise, either one ``3x3``
    (polar or Cartesian) or per detection ``(N, 3, 3)`` (polar).
    """
    det = np.atleast_2d(det)
    if model == POLAR:
        r, th, el = det[:, 0], det[:, 1], det[:, 2]
        ct, st, ce, se = np.cos(th), np.sin(th), np.cos(el), np.sin(el)
        jc = np.zeros((len(det), 3, 3))
        jc[:, 0] = np.stack([ce * ct, -r * ce * st, -r * se * ct], axis=-1)
        jc[:, 1] = np.stack([ce * st, r * ce * ct, -r * se * st], axis=-1)
        jc[:, 2] = np.stack([se, np.zeros_like(r), r * ce], axis=-1)
        cov_s = jc @ R @ np.swapaxes(jc, 1, 2)
    else:
        cov_s = np.broadcast_to(R, (len(det), 3, 3))
    r_si = sensor.T_sv.rotation @ x.pose.rotation
    out = r_si.T @ cov_s @ r_si
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def static_mask(x: State, sensor: SensorModel, det: np.ndarray, gate: float = 3.0) -> np.ndarray:
    if len(det) == 0:
        return np.zeros(0, dtype=bool)
    p = world_points(x, sensor, det)
    v_pred = radial_velocity_pred(x, sensor, p)
    return np.abs(det[:, 3] - v_pred) < gate * _static_sigma(det, x, sensor)


def _detection_cov(x: State, sensor: SensorModel, scan: RadarScan, idx, model: str) -> np.ndarray:
    if model == POLAR and scan.covariances is not None:
        R = scan.covariances[idx][:, :3, :3]
    else:
        R = noise_cov(sensor, model)[:3, :3]
    return backprojection_cov(x, sensor, scan.detections[idx], R, model)


def update_map(
    lmap: LandmarkMap,
    scan: RadarScan,
    x: State,
    assignments: AssignmentSet,
    cfg: EstimatorConfig,
    sensor: SensorModel,
    frame: int,
) -> int:
    """Count hits, fuse matched detections into their points, insert static-consistent
    unmatched detections and enforce the size cap.

    Eviction order: points unseen for ``cfg.stale_frames`` go first; within
    each group the lowest hit count, then the oldest ``last_seen``.
    Returns the number of inserted points.
    """
    model = cfg.measurement_model
    lmap.mark_matched(assignments.map_ids, frame)
    if len(assignments):
        di = assignments.detection_indices
        det = scan.detections[di]
        lmap.fuse(assignments.map_ids, world_points(x, sensor, det), _detection_cov(x, sensor, scan, di, model))
    idx = np.asarray(assignments.unmatched_detections, dtype=np.int64)
    det = scan.detections[idx] if len(idx) else np.zeros((0, 4))
    keep = static_mask(x, sensor, det, cfg.static_gate) & sensor.in_fov(det[:, :3]) if len(det) else np.zeros(0, bool)
    new = det[keep]
    if len(new):
        lmap.add(world_points(x, sensor, new), frame, _detection_cov(x, sensor, scan, idx[keep], model))
    cap = cfg.association.max_map_size
    excess = len(lmap) - cap
    if excess > 0:
        stale = lmap.last_seen < frame - cfg.stale_frames
        order = np.lexsort((lmap.ids, lmap.last_seen, lmap.hits, ~stale))
        mask = np.ones(len(lmap), dtype=bool)
        mask[order[:excess]] = False
        lmap.keep(mask)
    return len(new)


# --------------------------------------------------------------------------- #
# bootstrap
# --------------------------------------------------------------------------- #
def doppler_velocity(scan: RadarScan, sensor: SensorModel, iters: int = 100, inlier: float = 0.25, seed: int = 0):
    """Sensor-frame ego velocity from radial velocities by RANSAC + least squares.

    For static points ``v_i = d_i^T a`` with ``d_i`` the unit direction and
    ``a`` the range rate of a static point per unit direction.  Returns the
    state velocity ``[nu; omega]`` that produces ``a`` with zero angular rate.
    """
    return doppler_fit(scan, sensor, iters, inlier, seed)[0]


def doppler_fit(scan: RadarScan, sensor: SensorModel, iters: int = 100, inlier: float = 0.25, seed: int = 0):
    """:func:`doppler_velocity` plus the size of the static consensus set."""
    det = scan.detections
    if len(det) < 3:
        return np.zeros(6), 0
    d = cart_from_polar(np.column_stack([np.ones(len(det)), det[:, 1:3]]))
    v = det[:, 3]
    rng = np.random.default_rng(seed)
    best = None
    best_count = -1
    for _ in range(iters):
        pick = rng.choice(len(det), 3, replace=False)
        try:
            a = np.linalg.solve(d[pick], v[pick])
        except np.linalg.LinAlgError:
            continue
        count = int(np.sum(np.abs(d @ a - v) < inlier))
        if count > best_count:
            best, best_count = a, count
    if best is None:
        return np.zeros(6), 0
    mask = np.abs(d @ best - v) < inlier
    a, *_ = np.linalg.lstsq(d[mask], v[mask], rcond=None)
    nu = sensor.T_sv.rotation.T @ a
    return np.concatenate([nu, np.zeros(3)]), int(mask.sum())


# --------------------------------------------------------------------------- #
# the estimator
# --------------------------------------------------------------------------- #
@dataclass
class FrameDiagnostics:
    frame: int
    stamp: float
    n_det: int
    n_matched: int
    gn_iters: int
    cost: float
    runtime_ms: float
    fallback: bool = False
    map_size: int = 0
    inserted: int = 0
    restarted: bool = False


class OdometryEstimator:
    def __init__(self, cfg: EstimatorConfig | None = None, sensor: SensorModel | None = None):
        self.cfg = cfg or EstimatorConfig()
        self.sensor = sensor or SensorModel()
        self.map = LandmarkMap()
        self.problem: WindowProblem | None = None
        self.frame = -1
        self.estimates: list[State] = []
        self.diagnostics: list[FrameDiagnostics] = []
        self.posterior_cov: np.ndarray | None = None
        self.last_assignments: AssignmentSet | None = None

    # -- helpers ---------------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.cfg.dim

    @property
    def model(self) -> str:
        return self.cfg.measurement_model

    def _transition(self, x: State, dt: float):
        if self.cfg.motion_model == CONSTANT_ACCELERATION:
            return discretize(x.velocity, x.acceleration, self.cfg.Q, dt)
        return discretize_cv(x.velocity, self.cfg.Q, dt)

    def _candidates(self, x: State) -> np.ndarray:
        """Map rows whose prediction lies in (or near) the field of view."""
        if not len(self.map):
            return np.zeros(0, dtype=np.int64)
        r_s = self.sensor.T_sv.act(x.pose.act(self.map.positions))
        rng = np.linalg.norm(r_s, axis=1)
        m = self.cfg.fov_margin
        with np.errstate(invalid="ignore", divide="ignore"):
            az = np.arctan2(r_s[:, 1], r_s[:, 0])
            el = np.arcsin(np.clip(r_s[:, 2] / rng, -1, 1))
        ok = (
            (rng > max(self.sensor.r_min - 1.0, 1e-3))
            & (rng < self.sensor.r_max + 1.0)
            & (np.abs(az) <= self.sensor.fov_azimuth + m)
            & (np.abs(el) <= self.sensor.fov_elevation + m)
        )
        return np.flatnonzero(ok)

    def _observation(self, scan: RadarScan, assign: AssignmentSet, mp: MapPrediction) -> Observation:
        ids = assign.map_ids
        di = assign.detection_indices
        if not len(ids):
            return Observation(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 4, 4)), ids, di)
        pts = self.map.positions[self.map.index_of(ids)]
        z = scan_measurements(scan, self.model)[di]
        if scan.covariances is not None and self.model == POLAR:
            R = scan.covariances[di]
        else:
            R = np.broadcast_to(mp.R, (len(di), 4, 4))
        order = np.argsort(mp.ids)
        rows = order[np.searchsorted(mp.ids, ids, sorter=order)]
        # map-point uncertainty stays at its predicted value during the solve
        whiten = np.linalg.inv(np.linalg.cholesky(R + mp.pcov[rows]))
        return Observation(pts, z, whiten, ids, di)

    # -- main loop -------------------------------------------------------------
    def _bootstrap(self, scan: RadarScan, pose: Pose | None = None) -> State:
        vel = doppler_velocity(scan, self.sensor) if self.cfg.bootstrap == "doppler" else np.zeros(6)
        x0 = State(State.identity().pose if pose is None else pose, vel, np.zeros(6), scan.stamp)
        empty = AssignmentSet([], list(range(len(scan))), [])
        obs = Observation(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 4, 4)), np.zeros(0, np.int64), np.zeros(0, np.int64)
        )
        P0 = self.cfg.prior_cov()
        self.problem = WindowProblem([x0], x0, np.linalg.inv(P0), [], [], [obs])
        self.posterior_cov = P0
        self.last_assignments = empty
        return x0

    def _start(self, scan: RadarScan, t0: float, pose: Pose | None = None) -> tuple[State, FrameDiagnostics]:
        """Open a fresh window and seed the map from ``scan``; ``pose`` keeps the pose after a loss."""
        if pose is not None:
            # the old map no longer registers against the drifted pose
            self.map = LandmarkMap()
        x = self._bootstrap(scan, pose)
        inserted = update_map(self.map, scan, x, self.last_assignments, self.cfg, self.sensor, self.frame)
        lost = pose is not None
        diag = FrameDiagnostics(
            self.frame,
            scan.stamp,
            len(scan),
            0,
            0,
            0.0,
            1e3 * (time.perf_counter() - t0),
            lost,
            len(self.map),
            inserted,
            lost,
        )
        self.estimates.append(x)
        self.diagnostics.append(diag)
        return x, diag

    def step_frame(self, scan: RadarScan) -> tuple[State, FrameDiagnostics]:
        t0 = time.perf_counter()
        self.frame += 1
        cfg = self.cfg
        if self.problem is None:
            return self._start(scan, t0)

        prob = self.problem
        x_last = prob.states[-1]
        dt = scan.stamp - x_last.stamp
        if not dt > 0:
            raise ValueError(f"scan stamps must increase (dt = {dt})")
        trans = self._transition(x_last, dt)
        x_pred = _propagate(x_last, dt, cfg).with_stamp(scan.stamp)
        d = self.dim
        P_pred = trans.F[:d, :d] @ self.posterior_cov @ trans.F[:d, :d].T + trans.Qk[:d, :d]
        P_pred = 0.5 * (P_pred + P_pred.T)

        rows = self._candidates(x_pred)
        mp = predict_map(
            self.map.positions[rows],
            self.map.ids[rows],
            StateGaussian(x_pred, P_pred),
            self.sensor,
            self.model,
            self.map.covariances[rows],
        )
        assign = associate_prediction(scan, mp, cfg.association.gate)
        if len(assign) < cfg.min_matches or (
            len(assign) <= JOINT_TEST_MAX
            and joint_d2(scan, mp, assign, P_pred) > joint_gate(cfg.association.gate, len(assign))
        ):
            # a handful of pairs cannot pin the pose and, when the view is
            # blocked, are mostly clutter or movers; treat the frame as a dropout
            assign = AssignmentSet(
                [],
                sorted(assign.unmatched_detections + [int(j) for j in assign.detection_indices]),
                sorted(assign.unmatched_map_points + [int(m) for m in assign.map_ids]),
            )
        dropout = len(assign) == 0
        if dropout and cfg.restart_inliers > 0 and doppler_fit(scan, self.sensor)[1] >= cfg.restart_inliers:
            # plenty of static returns yet nothing registers: tracking is lost
            return self._start(scan, t0, x_pred.pose)
        obs = self._observation(scan, assign, mp)

        qk = trans.Qk[:d, :d]
        sqrt_info = np.linalg.inv(np.linalg.cholesky(qk))
        prob.states = prob.states + [x_pred]
        prob.qk_sqrt_info = prob.qk_sqrt_info + [sqrt_info]
        prob.dts = prob.dts + [dt]
        prob.observations = prob.observations + [obs]

        res = gauss_newton_solve(prob, self.sensor, cfg)
        x_new = res.states[-1]
        cov = np.linalg.inv(res.H)[-d:, -d:]
        self.posterior_cov = 0.5 * (cov + cov.T)

        # a dropout frame's pose is a pure prediction: do not anchor new points to it
        inserted = 0 if dropout else update_map(self.map, scan, x_new, assign, cfg, self.sensor, self.frame)
        if len(prob.states) >= cfg.window_size:
            self.problem = marginalize_oldest(prob, self.sensor, cfg)
        self.last_assignments = assign
        diag = FrameDiagnostics(
            self.frame,
            scan.stamp,
            len(scan),
            len(assign),
            res.iterations,
            res.costs[-1],
            1e3 * (time.perf_counter() - t0),
            dropout,
            len(self.map),
            inserted,
        )
        self.estimates.append(x_new)
        self.diagnostics.append(diag)
        return x_new, diag

    def run(self, scans) -> list[State]:
        for scan in scans:
            self.step_frame(scan)
        return self.estimates
