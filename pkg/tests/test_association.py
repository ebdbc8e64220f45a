import math

import numpy as np
import pytest
from conftest import association_instance

from magnus_odom.association import (
    CARTESIAN,
    POLAR,
    AssociationConfig,
    associate,
    associate_brute_force,
    chi2_gate,
    inflation_diagnostic,
    joint_d2,
    joint_gate,
    mahalanobis_sq,
    marginal_covariance,
    predict_map,
)
from magnus_odom.errors import SingularCovarianceError
from magnus_odom.landmarks import LandmarkMap
from magnus_odom.measurement import RadarScan, SensorModel, cart_from_polar, predict_detection
from magnus_odom.prior import State, StateGaussian
from magnus_odom.scenes import POSTERIOR_SIGMA, inflation_scenes
from magnus_odom.se3 import se3_exp
from magnus_odom.simulator import default_sensor


def chi2_quantile_bisect(p, dof):
    """Quantile from the closed-form CDF of even dof: 1 - exp(-x/2) sum_{k<dof/2} (x/2)^k / k!."""

    def cdf(x):
        return 1.0 - math.exp(-x / 2) * sum((x / 2) ** k / math.factorial(k) for k in range(dof // 2))

    lo, hi = 0.0, 200.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if cdf(mid) < p else (lo, mid)
    return 0.5 * (lo + hi)


def psd(rng, n, scale=1.0):
    a = rng.normal(size=(n, n)) * scale
    return a @ a.T


# -- gate ------------------------------------------------------------------------
def test_chi2_gate_values():
    assert chi2_gate(0.95, 4) == pytest.approx(9.4877, abs=1e-3)
    assert chi2_gate(0.95, 4) == pytest.approx(chi2_quantile_bisect(0.95, 4), abs=1e-9)
    assert chi2_gate(0.5, 2) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert chi2_gate(1e-9, 4) < 1e-3
    with pytest.raises(ValueError):
        chi2_gate(1.0)
    with pytest.raises(ValueError):
        AssociationConfig(gate=0.0)


# -- covariance algebra ----------------------------------------------------------
def test_marginal_covariance(rng):
    R = np.diag([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(marginal_covariance(rng.normal(size=(4, 18)), np.zeros((18, 18)), R), R)
    np.testing.assert_array_equal(marginal_covariance(np.zeros((4, 18)), psd(rng, 18), R), R)
    for _ in range(50):
        Rr = psd(rng, 4) + 1e-3 * np.eye(4)
        S = marginal_covariance(rng.normal(size=(4, 18)), psd(rng, 18), Rr)
        assert np.linalg.eigvalsh(S).min() >= np.linalg.eigvalsh(Rr).min() - 1e-12
    with pytest.raises(SingularCovarianceError):
        marginal_covariance(np.zeros((4, 18)), np.zeros((18, 18)), np.diag([1.0, 1, 1, 1e-14]))


def test_mahalanobis(rng):
    assert mahalanobis_sq(np.zeros(4), np.eye(4)) == 0
    assert mahalanobis_sq(np.ones(4), np.eye(4)) == pytest.approx(4)
    for _ in range(100):
        S = psd(rng, 4) + 0.1 * np.eye(4)
        e = rng.normal(size=4)
        assert mahalanobis_sq(e, S) == pytest.approx(e @ np.linalg.inv(S) @ e, rel=1e-9)
    with pytest.raises(SingularCovarianceError):
        mahalanobis_sq(np.ones(4), np.zeros((4, 4)))


# -- association -----------------------------------------------------------------
def one_point_setup():
    sensor = SensorModel()
    x = State.identity()
    lmap = LandmarkMap(np.array([[20.0, 1.0, 0.5]]))
    pred = StateGaussian(x, np.diag([1e-4] * 6 + [1e-2] * 6 + [1e-2] * 6))
    return sensor, x, lmap, pred


def test_exact_detection_matches_with_zero_d2():
    sensor, x, lmap, pred = one_point_setup()
    z = predict_detection(x, sensor, lmap.positions[0])
    a = associate(RadarScan(0.0, z[None]), lmap, pred, sensor)
    assert a.pairs == [(0, 0, 0.0)]


def test_gate_boundary():
    sensor, x, lmap, pred = one_point_setup()
    mp = predict_map(lmap.positions, lmap.ids, pred, sensor)
    gate = chi2_gate()
    # displace along range so that d2 = gate * scale
    for scale, matched in ((0.99, True), (1.01, False)):
        z = mp.pred[0].copy()
        z[0] += math.sqrt(gate * scale / np.linalg.inv(mp.S[0])[0, 0])
        a = associate(RadarScan(0.0, z[None]), lmap, pred, sensor)
        assert (len(a) == 1) == matched
        for _, _, d2 in a.pairs:
            assert d2 <= gate


def test_simulated_instance_matches_brute_force(rng):
    from magnus_odom.simulator import render_scan, simulate

    seq = simulate("straight_cruise", seed=3, noise=True)
    x = seq.ground_truth[40]
    scan = render_scan(x, seq.world, seq.sensor, 3, 40, True)
    keep = rng.permutation(len(scan))[:50]
    pts = seq.world.landmarks[rng.permutation(len(seq.world.landmarks))[:50]]
    lmap = LandmarkMap(pts)
    s = RadarScan(scan.stamp, scan.detections[keep])
    pred = StateGaussian(x, np.diag([1e-4] * 6 + [1e-2] * 12))
    a = associate(s, lmap, pred, seq.sensor)
    b = associate_brute_force(s, lmap, pred, seq.sensor)
    assert a == b


@pytest.mark.parametrize("model", [POLAR, CARTESIAN])
def test_indexed_equals_brute_force(rng, model):
    for _ in range(20):
        scan, lmap, pred, sensor = association_instance(rng, 120, 120)
        a = associate(scan, lmap, pred, sensor, model=model)
        b = associate_brute_force(scan, lmap, pred, sensor, model=model)
        assert a == b
        assert len(set(a.detection_indices)) == len(a) and len(set(a.map_ids)) == len(a)
        assert np.all(a.d2 <= chi2_gate())
        assert sorted(a.unmatched_detections + list(a.detection_indices)) == list(range(len(scan)))


# -- joint compatibility ---------------------------------------------------------
def test_joint_d2_single_pair_equals_pair_d2(rng):
    for _ in range(5):
        scan, lmap, pred, sensor = association_instance(rng, 60, 60)
        mp = predict_map(lmap.positions, lmap.ids, pred, sensor)
        a = associate(scan, lmap, pred, sensor)
        for m, j, d2 in a.pairs[:10]:
            one = type(a)([(m, j, d2)], [], [])
            assert joint_d2(scan, mp, one, pred.cov) == pytest.approx(d2, rel=1e-8)


def test_joint_d2_without_state_uncertainty_is_sum(rng):
    scan, lmap, pred, sensor = association_instance(rng, 60, 60)
    exact = StateGaussian(pred.mean, np.zeros((18, 18)))
    mp = predict_map(lmap.positions, lmap.ids, exact, sensor)
    a = associate(scan, lmap, exact, sensor)
    assert len(a) > 5
    assert joint_d2(scan, mp, a, exact.cov) == pytest.approx(sum(d2 for *_, d2 in a.pairs), rel=1e-9)


def test_joint_d2_dense_oracle(rng):
    from scipy.linalg import block_diag

    scan, lmap, pred, sensor = association_instance(rng, 40, 40)
    mp = predict_map(lmap.positions, lmap.ids, pred, sensor)
    a = associate(scan, lmap, pred, sensor)
    rows = [int(np.flatnonzero(mp.ids == m)[0]) for m in a.map_ids]
    e = np.concatenate([scan.detections[j] - mp.pred[r] for r, j in zip(rows, a.detection_indices)])
    G = np.vstack([mp.G[r] for r in rows])
    S = G @ pred.cov @ G.T + block_diag(*[mp.R for _ in rows])
    assert joint_d2(scan, mp, a, pred.cov) == pytest.approx(e @ np.linalg.solve(S, e), rel=1e-7)


def test_joint_d2_is_chi_square(rng):
    # correct assignments under a small linearization error: mean 4n, variance 8n
    sensor = SensorModel()
    x = State.identity()
    n = 5
    polar = np.column_stack([rng.uniform(10, 40, n), rng.uniform(-0.6, 0.6, n), rng.uniform(-0.1, 0.1, n)])
    pts = x.pose.inverse().act(sensor.T_sv.inverse().act(cart_from_polar(polar)))
    lmap = LandmarkMap(pts)
    P = np.diag([1e-6] * 6 + [1e-4] * 6 + [1e-4] * 6)
    sig = np.asarray(sensor.sigma)
    vals = []
    for _ in range(2000):
        truth = State(se3_exp(rng.normal(size=6) * 1e-3) @ x.pose, rng.normal(size=6) * 1e-2, rng.normal(size=6) * 1e-2)
        z = predict_detection(truth, sensor, pts) + sig * rng.standard_normal((n, 4))
        scan = RadarScan(0.0, z)
        g = StateGaussian(x, P)
        mp = predict_map(pts, lmap.ids, g, sensor)
        pairs = type(associate(scan, lmap, g, sensor))([(i, i, 0.0) for i in range(n)], [], [])
        vals.append(joint_d2(scan, mp, pairs, P))
    vals = np.array(vals)
    assert abs(vals.mean() - 4 * n) < 4 * np.sqrt(8 * n / len(vals))
    assert abs(vals.var() - 8 * n) < 0.2 * 8 * n


def test_joint_d2_catches_incompatible_pairs(rng):
    # two pairs each inside their gate that disagree on one shared state direction
    sensor = SensorModel()
    x = State.identity()
    pts = x.pose.inverse().act(sensor.T_sv.inverse().act(np.array([[20.0, 0.0, 0.0], [30.0, 0.0, 0.0]])))
    lmap = LandmarkMap(pts)
    P = np.diag([1e-12] * 18)
    P[6, 6] = 1.0  # forward velocity dominates
    g = StateGaussian(x, P)
    mp = predict_map(pts, lmap.ids, g, sensor)
    z = mp.pred.copy()
    sv = np.sqrt(mp.S[:, 3, 3])
    z[0, 3] += 2.0 * sv[0]
    z[1, 3] -= 2.0 * sv[1]
    scan = RadarScan(0.0, z)
    a = associate(scan, lmap, g, sensor)
    gate = chi2_gate()
    assert len(a) == 2 and all(d2 < gate for *_, d2 in a.pairs)
    assert joint_d2(scan, mp, a, P) > joint_gate(gate, 2) > gate


def test_joint_gate_tail_probability():
    from scipy.stats import chi2

    gate = chi2_gate(0.99, 4)
    assert joint_gate(gate, 1) == pytest.approx(gate, rel=1e-10)
    for n in (2, 5, 20):
        assert chi2.sf(joint_gate(gate, n), 4 * n) == pytest.approx(0.01, rel=1e-8)


def test_association_is_deterministic(rng):
    scan, lmap, pred, sensor = association_instance(rng, 80, 80)
    assert associate(scan, lmap, pred, sensor) == associate(scan, lmap, pred, sensor)


def test_ties_prefer_lower_detection_index():
    sensor, x, lmap, pred = one_point_setup()
    z = predict_detection(x, sensor, lmap.positions[0])
    a = associate(RadarScan(0.0, np.stack([z, z])), lmap, pred, sensor)
    assert a.pairs[0][1] == 0 and a.unmatched_detections == [1]


def test_per_detection_covariance_override():
    sensor, x, lmap, pred = one_point_setup()
    z = predict_detection(x, sensor, lmap.positions[0]).copy()
    z[3] += 1.0  # ~10 sigma once the predicted velocity variance is included
    assert len(associate(RadarScan(0.0, z[None]), lmap, pred, sensor)) == 0
    loose = np.diag(np.array([0.02, 0.003, 0.005, 1.0]) ** 2)[None]
    assert len(associate(RadarScan(0.0, z[None], covariances=loose), lmap, pred, sensor)) == 1


def test_empty_inputs():
    sensor, x, lmap, pred = one_point_setup()
    a = associate(RadarScan(0.0, np.zeros((0, 4))), lmap, pred, sensor)
    assert len(a) == 0 and a.unmatched_map_points == [0]
    a = associate(RadarScan(0.0, np.ones((2, 4))), LandmarkMap(), pred, sensor)
    assert a.unmatched_detections == [0, 1]


# -- inflation -------------------------------------------------------------------
def test_no_inflation_without_acceleration():
    sigma = POSTERIOR_SIGMA.copy()
    sigma[12:] = 0.0
    rep = inflation_diagnostic(
        inflation_scenes(50, seed=2, yaw_accel=(0.0, 0.0), posterior_sigma=sigma), default_sensor()
    )
    np.testing.assert_allclose(rep.det_ratio, 1.0, atol=1e-9)
    assert rep.cv_wrong_rate == rep.ca_wrong_rate


def test_yaw_acceleration_inflates(tmp_path):
    rep = inflation_diagnostic(inflation_scenes(50, seed=2), default_sensor())
    assert rep.mean_det_ratio > 1.0
    assert np.mean(rep.residual_norm_cv) > np.mean(rep.residual_norm_ca)
    assert rep.cv_wrong_rate >= rep.ca_wrong_rate
    path = tmp_path / "inflation.csv"
    rep.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "frame,predictor,n_matched,n_wrong,mean_d2,det_S_mean"
    assert len(lines) == 1 + 2 * 50


def test_inflation_scenes_are_seeded():
    a = inflation_scenes(3, seed=9)
    b = inflation_scenes(3, seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.detections, y.detections)
