import numpy as np
import pytest
from conftest import central_diff, random_state

from magnus_odom.association import POLAR, AssignmentSet, noise_cov
from magnus_odom.errors import DivergenceError
from magnus_odom.estimator import (
    AssociationConfig,
    EstimatorConfig,
    Observation,
    OdometryEstimator,
    WindowProblem,
    configure_baseline_cv_c,
    doppler_fit,
    doppler_velocity,
    gauss_newton_solve,
    linearize,
    marginalize_oldest,
    motion_error,
    update_map,
    window_cost,
)
from magnus_odom.landmarks import LandmarkMap
from magnus_odom.measurement import RadarScan, cart_from_polar
from magnus_odom.prior import (
    State,
    discretize,
    discretize_cv,
    propagate_nominal,
    propagate_nominal_cv,
    state_boxminus,
    state_boxplus,
)
from magnus_odom.se3 import se3_exp, se3_log
from magnus_odom.simulator import (
    DYNAMIC,
    DynamicObject,
    MotionProfile,
    Scenario,
    WorldModel,
    build_world,
    default_sensor,
    render_scan,
    scenario_presets,
    scenario_trajectory,
    simulate,
)

DT = 1.0 / 13.0


# -- motion residual -------------------------------------------------------------
@pytest.mark.parametrize("cfg", [EstimatorConfig(), configure_baseline_cv_c()], ids=["ca", "cv"])
def test_motion_error_zero_on_prediction(rng, cfg):
    x = random_state(rng)
    nxt = propagate_nominal(x, DT) if cfg.dim == 18 else propagate_nominal_cv(x, DT)
    e, _, _ = motion_error(x, nxt, DT, cfg=cfg)
    assert e.shape == (cfg.dim,)
    np.testing.assert_allclose(e, 0.0, atol=1e-12)


def test_motion_error_first_order(rng):
    x = random_state(rng)
    nxt = propagate_nominal(x, DT)
    for scale in (1e-2, 1e-3):
        g = rng.normal(size=18) * scale
        e, _, _ = motion_error(x, state_boxplus(g, nxt), DT)
        assert np.linalg.norm(e + g) <= 1e-3 * np.linalg.norm(g) ** 2 + 1e-13


@pytest.mark.parametrize("cfg", [EstimatorConfig(), configure_baseline_cv_c()], ids=["ca", "cv"])
def test_motion_error_jacobians(rng, cfg):
    d = cfg.dim
    for _ in range(10):
        xp = random_state(rng, v=10, w=0.5, vd=2, wd=0.5)
        xc = state_boxplus(rng.normal(size=18) * 0.05, propagate_nominal(xp, DT))
        if d == 12:
            xc = State(xc.pose, xc.velocity, np.zeros(6), xc.stamp)
            xp = State(xp.pose, xp.velocity, np.zeros(6), xp.stamp)
        _, jp, jc = motion_error(xp, xc, DT, cfg=cfg)

        def pad(v):
            return np.concatenate([v, np.zeros(18 - d)])

        fd_p = central_diff(lambda v: motion_error(state_boxplus(pad(v), xp), xc, DT, cfg=cfg)[0], np.zeros(d))
        fd_c = central_diff(lambda v: motion_error(xp, state_boxplus(pad(v), xc), DT, cfg=cfg)[0], np.zeros(d))
        np.testing.assert_allclose(jp, fd_p, atol=1e-5 * max(1, np.abs(fd_p).max()))
        np.testing.assert_allclose(jc, fd_c, atol=1e-5)


# -- noise-free windows ----------------------------------------------------------
@pytest.fixture(scope="module")
def hilly():
    sc = scenario_presets()["hilly_loop"]
    states = scenario_trajectory(sc)
    return sc, states, build_world(sc, states, 0, noise=False)


def make_window(hilly, start, K, cfg, init=None):
    sc, states, world = hilly
    sensor = sc.sensor
    truth = states[start : start + K]
    W = np.linalg.inv(np.linalg.cholesky(noise_cov(sensor, POLAR)))
    obs = []
    for k, x in enumerate(truth):
        scan = render_scan(x, world, sensor, 0, start + k, noise=False)
        ids = scan.truth_ids
        keep = ids >= 0
        n = int(keep.sum())
        obs.append(
            Observation(
                world.landmarks[ids[keep]],
                scan.detections[keep],
                np.broadcast_to(W, (n, 4, 4)).copy(),
                ids[keep],
                np.flatnonzero(keep),
            )
        )
    sqrt_info = [
        np.linalg.inv(np.linalg.cholesky(discretize(x.velocity, x.acceleration, cfg.Q, DT).Qk)) for x in truth[:-1]
    ]
    ops = list(truth) if init is None else init(truth)
    return truth, WindowProblem(ops, truth[0], np.linalg.inv(cfg.prior_cov()), sqrt_info, [DT] * (K - 1), obs)


def pose_err(a: State, b: State) -> float:
    return float(np.linalg.norm(se3_log(a.pose @ b.pose.inverse())))


def test_gn_at_truth_is_fixed_point(hilly):
    cfg = EstimatorConfig(robust_loss="none")
    truth, prob = make_window(hilly, 300, 4, cfg)
    res = gauss_newton_solve(prob, default_sensor(), cfg)
    assert res.iterations == 1
    assert res.costs[0] < 1e-10
    assert res.costs[-1] < 1e-10


def perturb_poses(rng, norm):
    def init(truth):
        out = []
        for x in truth:
            xi = rng.normal(size=6)
            xi *= norm / np.linalg.norm(xi)
            out.append(State(se3_exp(xi) @ x.pose, x.velocity, x.acceleration, x.stamp))
        return out

    return init


def test_gn_recovers_from_perturbation(hilly, rng):
    cfg = EstimatorConfig(robust_loss="none", gn_tol=1e-10, max_gn_iters=20)
    truth, prob = make_window(hilly, 200, 4, cfg, perturb_poses(rng, 0.1))
    res = gauss_newton_solve(prob, default_sensor(), cfg)
    assert max(pose_err(a, b) for a, b in zip(res.states, truth)) < 1e-6
    assert all(b <= a * (1 + 1e-12) for a, b in zip(res.costs, res.costs[1:]))


def test_gn_converges_quadratically(hilly, rng):
    cfg = EstimatorConfig(robust_loss="none", gn_tol=1e-12, max_gn_iters=20)
    truth, prob = make_window(hilly, 200, 4, cfg, perturb_poses(rng, 0.05))
    sensor = default_sensor()
    errs = []
    states = prob.states
    # one Gauss-Newton step at a time, recording the distance to the truth
    for _ in range(5):
        errs.append(max(pose_err(a, b) for a, b in zip(states, truth)))
        prob.states = states
        res = gauss_newton_solve(prob, sensor, EstimatorConfig(robust_loss="none", max_gn_iters=1, gn_tol=1e-14))
        states = res.states
    pairs = [(a, b) for a, b in zip(errs, errs[1:]) if b > 1e-9]
    assert len(pairs) >= 2
    for a, b in pairs:
        assert b <= 10.0 * a * a


def test_slide_preserves_estimate(hilly):
    cfg = EstimatorConfig(robust_loss="none")
    sensor = default_sensor()
    truth, prob = make_window(hilly, 400, 5, cfg)
    res = gauss_newton_solve(prob, sensor, cfg)
    prob.states = res.states
    slid = marginalize_oldest(prob, sensor, cfg)
    res2 = gauss_newton_solve(slid, sensor, cfg)
    d = state_boxminus(res2.states[-1], res.states[-1])
    assert np.linalg.norm(d) < 1e-9


def test_cost_matches_linearization(hilly, rng):
    cfg = EstimatorConfig()
    _, prob = make_window(hilly, 100, 3, cfg, perturb_poses(rng, 0.01))
    _, _, c = linearize(prob, default_sensor(), cfg)
    assert c == pytest.approx(window_cost(prob, default_sensor(), cfg), rel=1e-12)


def test_divergence_raised_when_no_descent(hilly, monkeypatch, rng):
    import magnus_odom.estimator as est

    cfg = EstimatorConfig(robust_loss="none", max_halvings=2)
    _, prob = make_window(hilly, 100, 3, cfg, perturb_poses(rng, 0.05))
    # a step pointing uphill can never be accepted
    monkeypatch.setattr(est, "_step", lambda H, g: g.copy())
    with pytest.raises(DivergenceError):
        est.gauss_newton_solve(prob, default_sensor(), cfg)


def test_damping_rescues_rejected_steps(hilly, monkeypatch, rng):
    import magnus_odom.estimator as est

    cfg = EstimatorConfig(robust_loss="none", gn_tol=1e-9, max_gn_iters=30)
    truth, prob = make_window(hilly, 200, 4, cfg, perturb_poses(rng, 0.05))
    calls = []

    def damped(*args):
        out = est._damped.__wrapped__(*args)
        calls.append(out[0] is not None)
        return out

    damped.__wrapped__ = est._damped
    # every undamped step is rejected, so only the damped path can make progress
    monkeypatch.setattr(est, "_halve", lambda *a: None)
    monkeypatch.setattr(est, "_damped", damped)
    res = est.gauss_newton_solve(prob, default_sensor(), cfg)
    assert calls and all(calls)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(res.costs, res.costs[1:]))
    assert max(pose_err(a, b) for a, b in zip(res.states, truth)) < 1e-5


def test_singular_system_is_damped(hilly, monkeypatch, rng):
    import magnus_odom.estimator as est
    from magnus_odom.errors import SingularSystemError

    cfg = EstimatorConfig(robust_loss="none")
    _, prob = make_window(hilly, 200, 3, cfg, perturb_poses(rng, 0.02))
    c0 = window_cost(prob, default_sensor(), cfg)
    real = est._step

    def step(H, g):
        # the undamped system is reported singular; damped ones differ from H
        if np.array_equal(H, step.H):
            raise SingularSystemError("forced")
        return real(H, g)

    orig_lin = est.linearize

    def lin(*a, **k):
        H, g, c = orig_lin(*a, **k)
        step.H = H
        return H, g, c

    step.H = None
    monkeypatch.setattr(est, "_step", step)
    monkeypatch.setattr(est, "linearize", lin)
    res = est.gauss_newton_solve(prob, default_sensor(), cfg)
    assert res.costs[-1] < 1e-3 * c0


# -- frame loop ------------------------------------------------------------------
def test_first_frame_bootstraps_map():
    seq = simulate("straight_cruise", seed=2, noise=False)
    est = OdometryEstimator(EstimatorConfig(), seq.sensor)
    x, diag = est.step_frame(seq.scans[0])
    np.testing.assert_array_equal(x.pose.matrix(), np.eye(4))
    assert diag.n_matched == 0 and diag.gn_iters == 0
    assert len(est.map) == len(seq.scans[0]) == diag.inserted


def test_stationary_velocity_is_consistent():
    profile = MotionProfile(((50.5 / 13.0, (0.0,) * 6),))
    seq = simulate(Scenario("parked", profile), seed=4)
    est = OdometryEstimator(EstimatorConfig(), seq.sensor)
    est.run(seq.scans[:50])
    v = est.estimates[-1].velocity
    sd = np.sqrt(np.diag(est.posterior_cov)[6:12])
    assert np.all(np.abs(v) < 3 * sd)


@pytest.mark.parametrize("cfg", [EstimatorConfig(), configure_baseline_cv_c()], ids=["ca_p", "cv_c"])
def test_frame_loop_invariants(cfg):
    seq = simulate("urban_stop_go", seed=5)
    est = OdometryEstimator(cfg, seq.sensor)
    for scan in seq.scans[:120]:
        x, diag = est.step_frame(scan)
        P = est.posterior_cov
        assert P.shape == (cfg.dim, cfg.dim)
        np.testing.assert_allclose(P, P.T, atol=0)
        assert np.linalg.eigvalsh(P).min() > -1e-12
        R = x.pose.rotation
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-8
        assert len(est.map) <= cfg.association.max_map_size
    assert all(d.n_matched > 0 for d in est.diagnostics[1:])
    assert pose_err(est.estimates[-1], seq.ground_truth[119]) < 2.0


def test_zero_association_falls_back_to_prediction():
    seq = simulate("straight_cruise", seed=1)
    est = OdometryEstimator(EstimatorConfig(), seq.sensor)
    est.run(seq.scans[:20])
    prev = est.estimates[-1]
    empty = RadarScan(seq.scans[20].stamp, np.zeros((0, 4)))
    x, diag = est.step_frame(empty)
    assert diag.fallback and diag.n_matched == 0
    pred = propagate_nominal(prev, empty.stamp - prev.stamp)
    assert pose_err(x, pred) < 0.05


def _few_detection_scan(seq, k, n, est):
    """``n`` detections of frame ``k`` whose landmarks were matched on frame ``k - 1``."""
    prev = seq.scans[k - 1].truth_ids[est.last_assignments.detection_indices]
    scan = seq.scans[k]
    keep = np.flatnonzero(np.isin(scan.truth_ids, prev))[:n]
    assert len(keep) == n
    return RadarScan(scan.stamp, scan.detections[keep])


@pytest.mark.parametrize("n, dropout", [(2, True), (3, False), (8, False)])
def test_min_matches_dropout(n, dropout):
    seq = simulate("straight_cruise", seed=1, noise=False)
    est = OdometryEstimator(EstimatorConfig(), seq.sensor)
    est.run(seq.scans[:20])
    x, diag = est.step_frame(_few_detection_scan(seq, 20, n, est))
    assert diag.fallback == dropout
    assert diag.n_matched == (0 if dropout else n)
    assert pose_err(x, seq.ground_truth[20]) < 0.05


def test_dropout_frames_insert_nothing():
    seq = simulate("straight_cruise", seed=1, noise=False)
    est = OdometryEstimator(EstimatorConfig(), seq.sensor)
    est.run(seq.scans[:20])
    size = len(est.map)
    _, diag = est.step_frame(_few_detection_scan(seq, 20, 2, est))
    assert diag.fallback and diag.inserted == 0 and len(est.map) == size


def _lost_scan(seq, k, far):
    # the view from far down the road, delivered at the next stamp: open but unregistered
    return RadarScan(seq.scans[k].stamp, seq.scans[far].detections)


def test_lost_tracking_restarts_from_prediction():
    seq = simulate("straight_cruise", seed=1, noise=False)
    est = OdometryEstimator(EstimatorConfig(), seq.sensor)
    est.run(seq.scans[:20])
    prev = est.estimates[-1]
    scan = _lost_scan(seq, 20, 300)
    x, diag = est.step_frame(scan)
    assert diag.restarted and diag.fallback and diag.n_matched == 0
    pred = propagate_nominal(prev, scan.stamp - prev.stamp)
    np.testing.assert_allclose(x.pose.matrix(), pred.pose.matrix(), atol=1e-12)
    np.testing.assert_allclose(x.velocity, doppler_velocity(scan, seq.sensor), atol=1e-12)
    np.testing.assert_array_equal(x.acceleration, 0.0)
    # the map is re-seeded from the new scan only
    assert len(est.map) == diag.inserted == len(scan)
    # and tracking continues from there
    x2, d2 = est.step_frame(RadarScan(seq.scans[21].stamp, seq.scans[301].detections))
    assert not d2.fallback and d2.n_matched > 0.9 * len(scan)


def test_restart_can_be_disabled():
    seq = simulate("straight_cruise", seed=1, noise=False)
    est = OdometryEstimator(EstimatorConfig(restart_inliers=0), seq.sensor)
    est.run(seq.scans[:20])
    _, diag = est.step_frame(_lost_scan(seq, 20, 300))
    assert diag.fallback and not diag.restarted


def test_doppler_fit_counts_static_consensus():
    seq = simulate("straight_cruise", seed=1, noise=False)
    scan = seq.scans[5]
    vel, n = doppler_fit(scan, seq.sensor)
    assert n == len(scan)
    np.testing.assert_allclose(vel[:3], seq.ground_truth[5].velocity[:3], atol=1e-9)
    assert doppler_fit(RadarScan(0.0, np.zeros((2, 4))), seq.sensor) == (pytest.approx(np.zeros(6)), 0)


@pytest.mark.parametrize("n, reject", [(6, True), (6, False), (40, True)])
def test_joint_test_wiring(monkeypatch, n, reject):
    import magnus_odom.estimator as est_mod

    seq = simulate("straight_cruise", seed=1, noise=False)
    est = OdometryEstimator(EstimatorConfig(), seq.sensor)
    est.run(seq.scans[:20])
    monkeypatch.setattr(est_mod, "joint_gate", lambda gate, m: -1.0 if reject else np.inf)
    _, diag = est.step_frame(_few_detection_scan(seq, 20, n, est))
    # large sets skip the joint test
    dropped = reject and n <= est_mod.JOINT_TEST_MAX
    assert diag.fallback == dropped
    assert diag.n_matched == (0 if dropped else n)


def test_stamps_must_increase():
    seq = simulate("straight_cruise", seed=1)
    est = OdometryEstimator(EstimatorConfig(), seq.sensor)
    est.step_frame(seq.scans[0])
    with pytest.raises(ValueError):
        est.step_frame(seq.scans[0])


# -- map maintenance -------------------------------------------------------------
def static_scene(n=40):
    x = State(se3_exp([0.3, -0.2, 0.0, 0.0, 0.0, 0.1]), -np.array([8.0, 0, 0, 0, 0, 0.05]), np.zeros(6))
    sensor = default_sensor()
    rng = np.random.default_rng(3)
    polar = np.column_stack([rng.uniform(5, 80, n), rng.uniform(-0.8, 0.8, n), rng.uniform(-0.2, 0.2, n)])
    p_v = sensor.T_sv.inverse().act(cart_from_polar(polar))
    world = WorldModel(x.pose.inverse().act(p_v), clutter_rate=0.0, detection_prob=1.0)
    return x, sensor, world


def unmatched(n):
    return AssignmentSet([], list(range(n)), [])


def test_update_map_inserts_static_points():
    x, sensor, world = static_scene()
    scan = render_scan(x, world, sensor, 0, 0, noise=False)
    lmap = LandmarkMap()
    n = update_map(lmap, scan, x, unmatched(len(scan)), EstimatorConfig(), sensor, 0)
    assert n == len(scan) == len(lmap) == 40
    order = np.argsort(scan.truth_ids)
    np.testing.assert_allclose(lmap.positions[order], world.landmarks, atol=1e-9)


def test_update_map_cap_evicts_exactly_one():
    x, sensor, world = static_scene(11)
    scan = render_scan(x, world, sensor, 0, 0, noise=False)
    cfg = EstimatorConfig(association=AssociationConfig(max_map_size=10))
    lmap = LandmarkMap()
    update_map(lmap, RadarScan(0.0, scan.detections[:10]), x, unmatched(10), cfg, sensor, 0)
    assert len(lmap) == 10
    update_map(lmap, RadarScan(0.0, scan.detections[10:]), x, unmatched(1), cfg, sensor, 1)
    assert len(lmap) == 10 and lmap.ids.max() == 10 and 0 not in lmap.ids


def test_update_map_rejects_moving_object():
    x, sensor, world = static_scene()
    # a car 20 m ahead driving toward the sensor at 6 m/s
    ahead = x.pose.inverse().act(np.array([24.0, 1.0, 0.5]))
    car = DynamicObject(
        -1.0, 1.0, ahead, x.pose.rotation.T @ np.array([-6.0, 0, 0]), 0.0,
        np.array([2.0, 1.0, 0.8]), np.array([[-2.0, 0.3, 0.0], [-2.0, -0.5, 0.4], [-2.0, 0.8, 0.2]]),
    )  # fmt: skip
    world = WorldModel(world.landmarks, [car], clutter_rate=0.0, detection_prob=1.0)
    scan = render_scan(x, world, sensor, 0, 0, noise=True)
    assert np.sum(scan.truth_ids == DYNAMIC) == 3
    lmap = LandmarkMap()
    update_map(lmap, scan, x, unmatched(len(scan)), EstimatorConfig(), sensor, 0)
    dyn = world.dynamic[0].points_at(0.0)
    d = np.linalg.norm(lmap.positions[:, None] - dyn[None], axis=2)
    assert d.min() > 1.0


def test_matched_points_count_hits():
    x, sensor, world = static_scene(5)
    scan = render_scan(x, world, sensor, 0, 0, noise=False)
    lmap = LandmarkMap()
    update_map(lmap, scan, x, unmatched(5), EstimatorConfig(), sensor, 0)
    a = AssignmentSet([(int(lmap.ids[0]), 0, 0.0)], [], list(lmap.ids[1:]))
    update_map(lmap, RadarScan(0.0, scan.detections[:1]), x, a, EstimatorConfig(), sensor, 3)
    assert lmap.hits[0] == 2 and lmap.last_seen[0] == 3


# -- baseline configuration ------------------------------------------------------
def test_baseline_configuration():
    cfg = configure_baseline_cv_c()
    assert cfg.dim == 12 and cfg.measurement_model == "cartesian"
    assert cfg.prior_cov().shape == (12, 12)
    x = State(se3_exp([1, 2, 3, 0.1, 0.2, 0.3]), np.array([5.0, 0, 0, 0, 0, 0.2]), np.zeros(6))
    np.testing.assert_allclose(
        propagate_nominal_cv(x, DT).pose.matrix(), (se3_exp(DT * x.velocity) @ x.pose).matrix(), atol=1e-14
    )
    tr = discretize_cv(x.velocity, cfg.Q, DT)
    assert tr.F.shape == (12, 12)
    with pytest.raises(ValueError):
        EstimatorConfig(window_size=1)
    with pytest.raises(ValueError):
        EstimatorConfig(gn_tol=0.0)
