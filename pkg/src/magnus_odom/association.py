"""Maximum-likelihood detection-to-map association with chi-squared gating.

For map point ``j`` with predicted measurement ``g_j`` and Jacobian ``G_j``
the innovation covariance is ``S_j = G_j P G_j^T + R`` and the squared
Mahalanobis distance to detection ``i`` is ``d2_ij = e_ij^T S_j^-1 e_ij``.
Pairs with ``d2 <= gate`` are admissible; the final assignment is built
greedily in ascending ``d2`` (ties: lower detection index, then lower map
id) so that every detection and map point is used at most once.

Candidate detections come from a KD-tree over the detections' Cartesian
positions, queried with a radius that bounds the gate region from above.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial import cKDTree
from scipy.stats import chi2

from .errors import SingularCovarianceError
from .landmarks import LandmarkMap
from .measurement import (
    RadarScan,
    SensorModel,
    cartesian_measurement_jacobian,
    detections_to_cartesian,
    measurement_jacobian,
    wrap_angle,
)
from .prior import State, StateGaussian

MAX_CONDITION = 1e12
POLAR = "polar"
CARTESIAN = "cartesian"


def chi2_gate(confidence: float = 0.95, dof: int = 4) -> float:
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    return float(chi2.ppf(confidence, dof))


@dataclass(frozen=True)
class AssociationConfig:
    gate: float = field(default_factory=chi2_gate)
    max_map_size: int = 1500

    def __post_init__(self):
        if not self.gate > 0:
            raise ValueError("gate must be positive")
        if not self.max_map_size > 0:
            raise ValueError("max_map_size must be positive")


@dataclass
class AssignmentSet:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (map id, detection index, d2)
    unmatched_detections: list[int] = field(default_factory=list)
    unmatched_map_points: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def map_ids(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def detection_indices(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)

    @property
    def d2(self) -> np.ndarray:
        return np.array([p[2] for p in self.pairs], dtype=float)


# --------------------------------------------------------------------------- #
# covariance algebra
# --------------------------------------------------------------------------- #
def _check_condition(s: np.ndarray) -> None:
    ev = np.linalg.eigvalsh(s)
    lo, hi = ev[..., 0], ev[..., -1]
    if np.any(lo <= 0) or np.any(hi > MAX_CONDITION * lo):
        raise SingularCovarianceError("innovation covariance is singular or badly conditioned")


def condition_number(s: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvalsh(0.5 * (s + np.swapaxes(s, -1, -2)))
    with np.errstate(divide="ignore"):
        return np.where(ev[..., 0] > 0, ev[..., -1] / ev[..., 0], np.inf)


def marginal_covariance(G: np.ndarray, P: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``S = G P G^T + R`` (batched over leading axes), symmetrized."""
    s = G @ P @ np.swapaxes(G, -1, -2) + R
    s = 0.5 * (s + np.swapaxes(s, -1, -2))
    _check_condition(s)
    return s


def mahalanobis_sq(e: np.ndarray, S: np.ndarray) -> float:
    """``e^T S^-1 e`` through a Cholesky factor."""
    S = np.asarray(S, dtype=float)
    _check_condition(S)
    try:
        low = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(str(exc)) from exc
    y = solve_triangular(low, np.asarray(e, dtype=float), lower=True)
    return float(y @ y)


def _pair_d2(e: np.ndarray, low: np.ndarray) -> np.ndarray:
    """Elementwise forward substitution for 4x4 factors: result does not depend on batch layout."""
    y0 = e[:, 0] / low[:, 0, 0]
    y1 = (e[:, 1] - low[:, 1, 0] * y0) / low[:, 1, 1]
    y2 = (e[:, 2] - low[:, 2, 0] * y0 - low[:, 2, 1] * y1) / low[:, 2, 2]
    y3 = (e[:, 3] - low[:, 3, 0] * y0 - low[:, 3, 1] * y1 - low[:, 3, 2] * y2) / low[:, 3, 3]
    return y0 * y0 + y1 * y1 + y2 * y2 + y3 * y3


# --------------------------------------------------------------------------- #
# predictions
# --------------------------------------------------------------------------- #
@dataclass
class MapPrediction:
    """Per map point prediction, Jacobian and innovation covariance (valid points only)."""

    ids: np.ndarray
    pred: np.ndarray  # (M, 4)
    G: np.ndarray  # (M, 4, dim)
    gpg: np.ndarray  # (M, 4, 4) state uncertainty G P G^T
    pcov: np.ndarray  # (M, 4, 4) map-point position uncertainty
    S: np.ndarray  # (M, 4, 4) gpg + pcov + the default R
    chol: np.ndarray  # (M, 4, 4)
    R: np.ndarray
    model: str


def measurement_model_fn(model: str):
    if model == POLAR:
        return measurement_jacobian
    if model == CARTESIAN:
        return cartesian_measurement_jacobian
    raise ValueError(f"unknown measurement model {model!r}")


def noise_cov(sensor: SensorModel, model: str) -> np.ndarray:
    return sensor.polar_cov if model == POLAR else sensor.cartesian_cov


def residual(z: np.ndarray, pred: np.ndarray, model: str) -> np.ndarray:
    e = z - pred
    if model == POLAR:
        e[..., 1] = wrap_angle(e[..., 1])
    return e


def scan_measurements(scan: RadarScan, model: str) -> np.ndarray:
    """Detections in the measurement space of ``model``."""
    if model == POLAR:
        return scan.detections
    return detections_to_cartesian(scan.detections)


def predict_map(
    points: np.ndarray,
    ids: np.ndarray,
    predicted: StateGaussian,
    sensor: SensorModel,
    model: str = POLAR,
    point_covs: np.ndarray | None = None,
) -> MapPrediction:
    """Predictions for world points ``(M, 3)``; degenerate or ill-conditioned ones are dropped.

    ``point_covs`` ``(M, 3, 3)`` are world-frame position covariances of the
    points; they enter ``S`` through the position columns of ``G`` (a point
    displacement ``dp`` moves ``r_v`` by ``R_vi dp``, exactly like a
    translational perturbation ``rho = R_vi dp``).
    """
    x = predicted.mean
    P = predicted.cov
    dim = P.shape[0]
    fn = measurement_model_fn(model)
    R = noise_cov(sensor, model)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    ids = np.asarray(ids, dtype=np.int64)
    if points.shape[0]:
        r_s = sensor.T_sv.act(x.pose.act(points))
        rng = np.linalg.norm(r_s, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = (rng > 1e-6) & (np.abs(r_s[:, 2]) < rng * np.cos(1e-6))
        points, ids = points[ok], ids[ok]
        if point_covs is not None:
            point_covs = np.asarray(point_covs, dtype=float)[ok]
    if points.shape[0] == 0:
        e = np.zeros((0, 4, 4))
        return MapPrediction(ids, np.zeros((0, 4)), np.zeros((0, 4, dim)), e, e, e, e, R, model)
    pred, G = fn(x, sensor, points, dim)
    gpg = G @ P @ np.swapaxes(G, 1, 2)
    gpg = 0.5 * (gpg + np.swapaxes(gpg, 1, 2))
    if point_covs is None:
        pcov = np.zeros_like(gpg)
    else:
        rot = x.pose.rotation
        gp = G[:, :, :3] @ rot
        pcov = gp @ point_covs @ np.swapaxes(gp, 1, 2)
        pcov = 0.5 * (pcov + np.swapaxes(pcov, 1, 2))
    S = gpg + pcov + R
    good = condition_number(S) <= MAX_CONDITION
    if not np.all(good):
        ids, pred, G, gpg, pcov, S = ids[good], pred[good], G[good], gpg[good], pcov[good], S[good]
    return MapPrediction(ids, pred, G, gpg, pcov, S, np.linalg.cholesky(S), R, model)


# --------------------------------------------------------------------------- #
# association
# --------------------------------------------------------------------------- #
def _pairs_d2(mp: MapPrediction, z: np.ndarray, covs, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    e = residual(z[cols], mp.pred[rows], mp.model)
    if covs is None:
        return _pair_d2(e, mp.chol[rows])
    s = mp.gpg[rows] + mp.pcov[rows] + covs[cols]
    return _pair_d2(e, np.linalg.cholesky(s))


def _greedy(n_det: int, mp: MapPrediction, rows, cols, d2, gate: float) -> AssignmentSet:
    ok = d2 <= gate
    rows, cols, d2 = rows[ok], cols[ok], d2[ok]
    mids = mp.ids[rows]
    order = np.lexsort((mids, cols, d2))
    used_det = np.zeros(n_det, dtype=bool)
    used_map = set()
    pairs = []
    for k in order:
        c, m = int(cols[k]), int(mids[k])
        if used_det[c] or m in used_map:
            continue
        used_det[c] = True
        used_map.add(m)
        pairs.append((m, c, float(d2[k])))
    return AssignmentSet(
        pairs,
        [int(i) for i in np.flatnonzero(~used_det)],
        [int(m) for m in mp.ids if int(m) not in used_map],
    )


def _search_radius(mp: MapPrediction, gate: float, r_bound: np.ndarray) -> np.ndarray:
    """Upper bound on the Cartesian distance between a prediction and any detection inside its gate."""
    var = np.diagonal(mp.gpg + mp.pcov, axis1=1, axis2=2) + r_bound
    a = np.sqrt(gate * var)
    if mp.model == POLAR:
        ang = np.minimum(a[:, 1], np.pi) + a[:, 2]
        rad = a[:, 0] + (mp.pred[:, 0] + a[:, 0]) * ang
    else:
        # marginal of the position block bounds each position component
        rad = np.sqrt(a[:, 0] ** 2 + a[:, 1] ** 2 + a[:, 2] ** 2)
    return rad * (1.0 + 1e-9) + 1e-9


def associate_prediction(scan: RadarScan, mp: MapPrediction, gate: float) -> AssignmentSet:
    n_det = len(scan)
    if n_det == 0 or len(mp.ids) == 0:
        return AssignmentSet([], list(range(n_det)), [int(m) for m in mp.ids])
    z = scan_measurements(scan, mp.model)
    covs = scan.covariances if mp.model == POLAR else None
    r_bound = np.diag(mp.R) if covs is None else np.diagonal(covs, axis1=1, axis2=2).max(axis=0)
    xyz = detections_to_cartesian(scan.detections)[:, :3]
    centers = mp.pred[:, :3] if mp.model == CARTESIAN else detections_to_cartesian(mp.pred)[:, :3]
    tree = cKDTree(xyz)
    hits = tree.query_ball_point(centers, _search_radius(mp, gate, r_bound))
    counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
    rows = np.repeat(np.arange(len(hits)), counts)
    cols = np.fromiter((c for h in hits for c in h), dtype=np.int64, count=int(counts.sum()))
    d2 = _pairs_d2(mp, z, covs, rows, cols)
    return _greedy(n_det, mp, rows, cols, d2, gate)


def joint_d2(scan: RadarScan, mp: MapPrediction, assign: AssignmentSet, P: np.ndarray) -> float:
    """Mahalanobis distance of all matched innovations stacked together.

    Unlike the per-pair ``d2`` this keeps the correlation through the shared
    state error, so a few pairs that each pass their gate but pull the state
    in incompatible directions are caught.  ``P`` is the predicted state
    covariance used to build ``mp``; the result is chi-square with ``4 n``
    degrees of freedom under a correct assignment.
    """
    if len(assign) == 0:
        return 0.0
    rows = np.searchsorted(mp.ids, assign.map_ids)
    if not np.array_equal(mp.ids[np.minimum(rows, len(mp.ids) - 1)], assign.map_ids):
        # ids are not sorted: fall back to a lookup table
        index = {int(m): k for k, m in enumerate(mp.ids)}
        rows = np.array([index[int(m)] for m in assign.map_ids], dtype=np.int64)
    cols = assign.detection_indices
    z = scan_measurements(scan, mp.model)
    e = residual(z[cols], mp.pred[rows], mp.model).ravel()
    if mp.model == POLAR and scan.covariances is not None:
        noise = scan.covariances[cols]
    else:
        noise = np.broadcast_to(mp.R, (len(cols), 4, 4))
    n = len(cols)
    G = mp.G[rows].reshape(4 * n, -1)
    S = G @ P @ G.T
    blocks = mp.pcov[rows] + noise
    for k in range(n):
        S[4 * k : 4 * k + 4, 4 * k : 4 * k + 4] += blocks[k]
    try:
        L = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError:
        return float("inf")
    w = solve_triangular(L, e, lower=True)
    return float(w @ w)


def joint_gate(gate: float, n: int) -> float:
    """Threshold for :func:`joint_d2` at the tail probability of the per-pair ``gate``."""
    return float(chi2.ppf(chi2.cdf(gate, 4), 4 * n))


def associate(
    scan: RadarScan,
    lmap: LandmarkMap,
    predicted: StateGaussian,
    sensor: SensorModel,
    cfg: AssociationConfig | None = None,
    model: str = POLAR,
) -> AssignmentSet:
    cfg = cfg or AssociationConfig()
    mp = predict_map(lmap.positions, lmap.ids, predicted, sensor, model, lmap.covariances)
    out = associate_prediction(scan, mp, cfg.gate)
    dropped = np.setdiff1d(lmap.ids, mp.ids)
    out.unmatched_map_points = sorted(out.unmatched_map_points + [int(m) for m in dropped])
    return out


def associate_brute_force(
    scan: RadarScan,
    lmap: LandmarkMap,
    predicted: StateGaussian,
    sensor: SensorModel,
    cfg: AssociationConfig | None = None,
    model: str = POLAR,
) -> AssignmentSet:
    """Exhaustive all-pairs oracle with the same decision rule as :func:`associate`."""
    cfg = cfg or AssociationConfig()
    mp = predict_map(lmap.positions, lmap.ids, predicted, sensor, model, lmap.covariances)
    n_det = len(scan)
    rows, cols = np.divmod(np.arange(len(mp.ids) * n_det), max(n_det, 1))
    if n_det == 0:
        rows = cols = np.zeros(0, dtype=np.int64)
    z = scan_measurements(scan, model)
    covs = scan.covariances if model == POLAR else None
    d2 = _pairs_d2(mp, z, covs, rows, cols) if len(rows) else np.zeros(0)
    out = _greedy(n_det, mp, rows, cols, d2, cfg.gate)
    dropped = np.setdiff1d(lmap.ids, mp.ids)
    out.unmatched_map_points = sorted(out.unmatched_map_points + [int(m) for m in dropped])
    return out


# --------------------------------------------------------------------------- #
# covariance inflation under unmodeled acceleration
# --------------------------------------------------------------------------- #
@dataclass
class InflationScene:
    """One association test: a map point, its true detection and a distractor.

    ``ca_prediction`` carries the predicted covariance used for both
    predictors; ``cv_prediction`` is the mean obtained by ignoring
    acceleration.  ``detections`` rows are ``[correct, distractor]``.
    """

    truth: State
    cv_prediction: State
    ca_prediction: StateGaussian
    point: np.ndarray
    detections: np.ndarray
    correct: int = 0


@dataclass
class InflationReport:
    det_ratio: np.ndarray  # det(S~) / det(S) per scene
    residual_norm_cv: np.ndarray
    residual_norm_ca: np.ndarray
    d2_cv: np.ndarray  # (n, 2): d2 of [correct, distractor] under S~
    d2_ca: np.ndarray
    wrong_cv: np.ndarray  # bool: a wrong detection was selected
    wrong_ca: np.ndarray
    matched_cv: np.ndarray
    matched_ca: np.ndarray
    det_s_cv: np.ndarray
    det_s_ca: np.ndarray

    @property
    def mean_det_ratio(self) -> float:
        return float(np.mean(self.det_ratio))

    @property
    def cv_wrong_rate(self) -> float:
        return float(np.mean(self.wrong_cv))

    @property
    def ca_wrong_rate(self) -> float:
        return float(np.mean(self.wrong_ca))

    def rows(self) -> list[dict]:
        out = []
        for k in range(len(self.det_ratio)):
            for name, wrong, matched, d2, dets in (
                ("cv", self.wrong_cv, self.matched_cv, self.d2_cv, self.det_s_cv),
                ("ca", self.wrong_ca, self.matched_ca, self.d2_ca, self.det_s_ca),
            ):
                out.append(
                    {
                        "frame": k,
                        "predictor": name,
                        "n_matched": int(matched[k]),
                        "n_wrong": int(wrong[k]),
                        "mean_d2": float(np.mean(d2[k])),
                        "det_S_mean": float(dets[k]),
                    }
                )
        return out

    def to_csv(self, path) -> None:
        cols = ["frame", "predictor", "n_matched", "n_wrong", "mean_d2", "det_S_mean"]
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def inflation_diagnostic(
    scenes: list[InflationScene],
    sensor: SensorModel,
    gate: float | None = None,
    model: str = POLAR,
) -> InflationReport:
    """Compare association under the acceleration-blind and full predictions.

    Relative to the full prediction, the blind predictor's residual carries
    the bias ``e_bar = g(x_ca) - g(x_cv)``; its second moment is
    ``S~ = e_bar e_bar^T + G P G^T + R``.  The full predictor uses
    ``S = G P G^T + R``.  Both use the same ``P`` so the comparison isolates
    the residual outer product.
    """
    gate = chi2_gate() if gate is None else gate
    fn = measurement_model_fn(model)
    R = noise_cov(sensor, model)
    out = {k: [] for k in InflationReport.__dataclass_fields__}
    for sc in scenes:
        P = sc.ca_prediction.cov
        dim = P.shape[0]
        g_cv, G_cv = fn(sc.cv_prediction, sensor, sc.point, dim)
        g_ca, G_ca = fn(sc.ca_prediction.mean, sensor, sc.point, dim)
        ebar = residual(g_ca[0], g_cv[0], model)
        s_cv = np.outer(ebar, ebar) + G_cv[0] @ P @ G_cv[0].T + R
        s_ca = G_ca[0] @ P @ G_ca[0].T + R
        z = sc.detections if model == POLAR else detections_to_cartesian(sc.detections)
        res = {}
        for name, g, s in (("cv", g_cv[0], s_cv), ("ca", g_ca[0], s_ca)):
            d2 = np.array([mahalanobis_sq(residual(zi, g, model), s) for zi in z])
            best = int(np.argmin(d2))
            matched = d2[best] <= gate
            res[name] = (d2, matched, matched and best != sc.correct, np.linalg.det(s))
        out["det_ratio"].append(res["cv"][3] / res["ca"][3])
        out["residual_norm_cv"].append(np.linalg.norm(residual(z[sc.correct], g_cv[0], model)))
        out["residual_norm_ca"].append(np.linalg.norm(residual(z[sc.correct], g_ca[0], model)))
        for name in ("cv", "ca"):
            d2, matched, wrong, dets = res[name]
            out[f"d2_{name}"].append(d2)
            out[f"matched_{name}"].append(matched)
            out[f"wrong_{name}"].append(wrong)
            out[f"det_s_{name}"].append(dets)
    return InflationReport(**{k: np.asarray(v) for k, v in out.items()})
