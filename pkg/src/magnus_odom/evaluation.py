"""KITTI-style odometry metrics, per-axis drift and runtime statistics.

Trajectories are handled as ``(N, 4, 4)`` world-from-vehicle matrices.
Estimator states store the inverse (world to vehicle), so
:func:`world_poses` converts lists of states.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import TooShortError

SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


def world_poses(traj) -> np.ndarray:
    """``(N, 4, 4)`` world-from-vehicle matrices from states, poses or matrices."""
    if isinstance(traj, np.ndarray):
        if traj.ndim != 3 or traj.shape[1:] != (4, 4):
            raise ValueError("expected an (N, 4, 4) array of world-from-vehicle poses")
        return traj
    out = np.zeros((len(traj), 4, 4))
    for i, item in enumerate(traj):
        pose = getattr(item, "pose", item)
        # states and poses carry T_vi; invert to world-from-vehicle
        rot = pose.rotation.T
        out[i, :3, :3] = rot
        out[i, :3, 3] = -rot @ pose.translation
        out[i, 3, 3] = 1.0
    return out


def _inv(t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    rt = np.swapaxes(t[..., :3, :3], -1, -2)
    out[..., :3, :3] = rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", rt, t[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def trajectory_distances(poses: np.ndarray) -> np.ndarray:
    """Cumulative path length along the trajectory, starting at 0."""
    steps = np.linalg.norm(np.diff(poses[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _angle(rot: np.ndarray) -> np.ndarray:
    w = np.stack(
        [rot[..., 2, 1] - rot[..., 1, 2], rot[..., 0, 2] - rot[..., 2, 0], rot[..., 1, 0] - rot[..., 0, 1]], axis=-1
    )
    tr = rot[..., 0, 0] + rot[..., 1, 1] + rot[..., 2, 2]
    return np.arctan2(0.5 * np.linalg.norm(w, axis=-1), 0.5 * (tr - 1.0))


@dataclass
class OdometryErrors:
    t_err: float  # percent
    r_err: float  # deg/m
    lengths: dict[int, tuple[float, float, int]]  # L -> (t_err %, r_err deg/m, n_segments)
    drift: dict[str, float] = field(default_factory=dict)  # terminal x,y,z (m), roll,pitch,yaw (deg)
    n_segments: int = 0

    def rows(self) -> list[list]:
        out = [[L, t, r, n] for L, (t, r, n) in sorted(self.lengths.items())]
        out.append(["all", self.t_err, self.r_err, self.n_segments])
        return out


def _segment_errors(gt: np.ndarray, est: np.ndarray, dist: np.ndarray, length: float):
    first = np.arange(len(dist))
    # first frame whose distance exceeds the start by more than L
    last = np.searchsorted(dist, dist + length, side="right")
    ok = last < len(dist)
    first, last = first[ok], last[ok]
    if len(first) == 0:
        return np.zeros(0), np.zeros(0)
    gt_rel = _inv(gt[first]) @ gt[last]
    est_rel = _inv(est[first]) @ est[last]
    err = _inv(gt_rel) @ est_rel
    t = np.linalg.norm(err[:, :3, 3], axis=1) / length
    r = np.degrees(_angle(err[:, :3, :3])) / length
    return t, r


def kitti_errors(est, gt, lengths=SEGMENT_LENGTHS) -> OdometryErrors:
    """Relative-pose errors over segments of fixed path length, every start frame.

    The headline ``t_err``/``r_err`` pool all segments of all lengths.
    """
    est, gt = world_poses(est), world_poses(gt)
    if est.shape != gt.shape:
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    dist = trajectory_distances(gt)
    per, all_t, all_r = {}, [], []
    for L in lengths:
        t, r = _segment_errors(gt, est, dist, float(L))
        if len(t):
            per[int(L)] = (100.0 * float(t.mean()), float(r.mean()), len(t))
            all_t.append(t)
            all_r.append(r)
        else:
            per[int(L)] = (float("nan"), float("nan"), 0)
    if not all_t:
        raise TooShortError(f"path length {dist[-1]:.1f} m has no {min(lengths)} m segment")
    t_all = np.concatenate(all_t)
    r_all = np.concatenate(all_r)
    drift = per_axis_drift(est, gt)
    return OdometryErrors(100.0 * float(t_all.mean()), float(r_all.mean()), per, drift.terminal(), len(t_all))


@dataclass
class DriftSeries:
    distance: np.ndarray  # m along the ground truth
    xyz: np.ndarray  # (N, 3) m
    rpy: np.ndarray  # (N, 3) roll, pitch, yaw in deg

    @property
    def z(self) -> np.ndarray:
        return self.xyz[:, 2]

    @property
    def roll(self) -> np.ndarray:
        return self.rpy[:, 0]

    @property
    def pitch(self) -> np.ndarray:
        return self.rpy[:, 1]

    def terminal(self) -> dict[str, float]:
        names = ("x", "y", "z", "roll", "pitch", "yaw")
        vals = np.concatenate([self.xyz[-1], self.rpy[-1]])
        return {k: float(v) for k, v in zip(names, vals)}

    def slopes(self, per: float = 100.0) -> dict[str, float]:
        """Least-squares drift rate of each axis per ``per`` metres."""
        names = ("x", "y", "z", "roll", "pitch", "yaw")
        data = np.column_stack([self.xyz, self.rpy])
        d = self.distance
        if np.ptp(d) == 0:
            return {k: 0.0 for k in names}
        coef = np.polyfit(d, data, 1)[0]
        return {k: float(c * per) for k, c in zip(names, coef)}


def per_axis_drift(est, gt) -> DriftSeries:
    """``gt^-1 est`` per frame as translation (m) and roll/pitch/yaw (deg)."""
    est, gt = world_poses(est), world_poses(gt)
    if est.shape != gt.shape:
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    err = _inv(gt) @ est
    # intrinsic z-y'-x'': yaw, pitch, roll
    ypr = Rotation.from_matrix(err[:, :3, :3]).as_euler("ZYX", degrees=True)
    return DriftSeries(trajectory_distances(gt), err[:, :3, 3].copy(), ypr[:, ::-1].copy())


@dataclass(frozen=True)
class RuntimeReport:
    mean: float
    median: float
    p95: float
    n: int


def runtime_report(diagnostics) -> RuntimeReport:
    """Per-frame wall-clock statistics (ms) from diagnostics records or plain numbers."""
    ms = np.array([getattr(d, "runtime_ms", d) for d in diagnostics], dtype=float)
    if ms.size == 0:
        return RuntimeReport(float("nan"), float("nan"), float("nan"), 0)
    return RuntimeReport(float(ms.mean()), float(np.median(ms)), float(np.percentile(ms, 95)), int(ms.size))


def write_metrics_csv(path, errors: OdometryErrors) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["length_m", "t_err_pct", "r_err_degpm", "n_segments"])
        for L, t, r, n in errors.rows():
            w.writerow([L, f"{t:.6f}", f"{r:.8f}", n])


def write_drift_csv(path, drift: DriftSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "distance_m", "z_err", "roll_err", "pitch_err"])
        for k in range(len(drift.distance)):
            w.writerow(
                [k, f"{drift.distance[k]:.6f}", f"{drift.z[k]:.6f}", f"{drift.roll[k]:.6f}", f"{drift.pitch[k]:.6f}"]
            )
