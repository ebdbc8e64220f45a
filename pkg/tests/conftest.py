import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from magnus_odom.prior import State
from magnus_odom.se3 import se3_exp

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_twist(rng, lin=1.0, ang=1.0):
    return np.concatenate([rng.uniform(-lin, lin, 3), rng.uniform(-ang, ang, 3)])


def bounded(rng, radius):
    """Uniform direction, norm uniform in [0, radius]."""
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v) * rng.uniform(0, radius)


def random_state(rng, v=30.0, w=1.0, vd=5.0, wd=1.0, stamp=0.0):
    pose = se3_exp(np.concatenate([rng.uniform(-20, 20, 3), bounded(rng, 2.5)]))
    vel = np.concatenate([bounded(rng, v), bounded(rng, w)])
    acc = np.concatenate([bounded(rng, vd), bounded(rng, wd)])
    return State(pose, vel, acc, stamp)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def central_diff(f, x0, h=1e-6):
    """Jacobian of ``f`` at ``x0`` by central differences, column by column."""
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for i in range(x0.size):
        d = np.zeros_like(x0)
        d[i] = h
        cols.append((np.asarray(f(x0 + d)) - np.asarray(f(x0 - d))) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def association_instance(rng, n_map=200, n_det=200, model="polar"):
    """Random map, predicted state and scan with true detections, clutter and ties."""
    from magnus_odom.landmarks import LandmarkMap
    from magnus_odom.measurement import RadarScan, SensorModel, cart_from_polar, predict_detection
    from magnus_odom.prior import StateGaussian

    x = random_state(rng, v=15.0, w=0.5, vd=2.0, wd=0.5)
    sensor = SensorModel(T_sv=se3_exp([-3.7, 0, -0.5, 0, 0, 0]))
    polar = np.column_stack([rng.uniform(3, 90, n_map), rng.uniform(-0.8, 0.8, n_map), rng.uniform(-0.2, 0.2, n_map)])
    p_v = sensor.T_sv.inverse().act(cart_from_polar(polar))
    pts = x.pose.inverse().act(p_v)
    a = rng.normal(size=(18, 18)) * rng.uniform(1e-4, 3e-2)
    cov = a @ a.T + 1e-8 * np.eye(18)
    pred = predict_detection(x, sensor, pts)
    sig = np.asarray(sensor.sigma)
    n_true = min(n_det, n_map) * 3 // 4
    det = pred[:n_true] + sig * rng.standard_normal((n_true, 4)) * rng.uniform(0.5, 3.0, (n_true, 1))
    clutter = np.column_stack(
        [
            rng.uniform(3, 90, n_det - n_true),
            rng.uniform(-0.8, 0.8, n_det - n_true),
            rng.uniform(-0.2, 0.2, n_det - n_true),
            rng.uniform(-5, 5, n_det - n_true),
        ]
    )
    det = np.vstack([det, clutter])
    # exact duplicates create d2 ties resolved by index
    det[-1] = det[0]
    lmap = LandmarkMap(pts)
    return RadarScan(0.0, det[rng.permutation(n_det)]), lmap, StateGaussian(x, cov), sensor


# acceptance criteria report: one line per criterion at the end of the session
ACCEPTANCE: dict[int, str] = {}
ACCEPTANCE_EXPECTED: set[int] = set()


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_EXPECTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_EXPECTED):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"criterion {n:2d}: FAIL  (did not complete)"))
