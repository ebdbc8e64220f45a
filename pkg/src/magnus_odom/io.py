"""File formats: TUM-style trajectories and JSON-lines radar scans.

Floats are written with ``repr`` so that reading a file and writing it back
reproduces it byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataFormatError
from .measurement import RadarScan
from .prior import State
from .se3 import Pose


@dataclass
class Trajectory:
    """Stamped world-from-vehicle poses with quaternions ``[qx, qy, qz, qw]``, ``qw >= 0``."""

    stamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quaternions, dtype=float).reshape(-1, 4).copy()
        if not (len(self.stamps) == len(self.positions) == len(q)):
            raise ValueError("stamps, positions and quaternions must have the same length")
        norm = np.linalg.norm(q, axis=1)
        if np.any(norm == 0) or not np.all(np.isfinite(q)):
            raise ValueError("quaternions must be finite and non-zero")
        # renormalize only when needed so that a canonical file round-trips exactly
        off = np.abs(norm - 1.0) > 1e-12
        q[off] /= norm[off, None]
        q[q[:, 3] < 0] *= -1.0
        self.quaternions = q

    def __len__(self) -> int:
        return len(self.stamps)

    @classmethod
    def from_states(cls, states: list[State]) -> Trajectory:
        rot = np.array([s.pose.rotation.T for s in states]).reshape(-1, 3, 3)
        pos = -np.einsum("nij,nj->ni", rot, np.array([s.pose.translation for s in states]).reshape(-1, 3))
        quat = Rotation.from_matrix(rot).as_quat() if len(states) else np.zeros((0, 4))
        return cls(np.array([s.stamp for s in states]), pos, quat)

    def matrices(self) -> np.ndarray:
        """``(N, 4, 4)`` world-from-vehicle transforms."""
        out = np.zeros((len(self), 4, 4))
        if len(self):
            out[:, :3, :3] = Rotation.from_quat(self.quaternions).as_matrix()
        out[:, :3, 3] = self.positions
        out[:, 3, 3] = 1.0
        return out

    def poses(self) -> list[Pose]:
        """Vehicle-from-world poses, the convention of :class:`State`."""
        return [Pose(m[:3, :3].T, -m[:3, :3].T @ m[:3, 3]) for m in self.matrices()]


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        fh.writelines(
            " ".join(repr(float(v)) for v in (t, *p, *q)) + "\n"
            for t, p, q in zip(traj.stamps, traj.positions, traj.quaternions)
        )


def read_trajectory(path) -> Trajectory:
    stamps, pos, quat = [], [], []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataFormatError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{n}: {exc}") from exc
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError(f"{path}:{n}: non-finite value")
            stamps.append(vals[0])
            pos.append(vals[1:4])
            quat.append(vals[4:8])
    try:
        return Trajectory(np.array(stamps), np.array(pos).reshape(-1, 3), np.array(quat).reshape(-1, 4))
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def scan_to_json(scan: RadarScan) -> str:
    rec = {"stamp": float(scan.stamp), "detections": scan.detections.tolist()}
    if scan.covariances is not None:
        rec["covariances"] = np.asarray(scan.covariances).tolist()
    return json.dumps(rec, separators=(",", ":"))


def scan_from_json(line: str, where: str = "") -> RadarScan:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{where}: invalid JSON ({exc.msg})") from exc
    if not isinstance(rec, dict) or "stamp" not in rec or "detections" not in rec:
        raise DataFormatError(f"{where}: a scan needs 'stamp' and 'detections'")
    try:
        stamp = float(rec["stamp"])
        det = np.array(rec["detections"], dtype=float).reshape(-1, 4)
        cov = None
        if rec.get("covariances") is not None:
            cov = np.array(rec["covariances"], dtype=float).reshape(len(det), 4, 4)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{where}: {exc}") from exc
    if not (math.isfinite(stamp) and np.all(np.isfinite(det))):
        raise DataFormatError(f"{where}: non-finite value")
    if cov is not None and not np.allclose(cov, np.swapaxes(cov, 1, 2)):
        raise DataFormatError(f"{where}: covariance overrides must be symmetric")
    return RadarScan(stamp, det, cov)


def write_scans(path, scans) -> None:
    with open(path, "w") as fh:
        fh.writelines(scan_to_json(scan) + "\n" for scan in scans)


def iter_scans(path):
    """Stream scans from a JSON-lines file; errors name the offending line."""
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                yield scan_from_json(line, f"{path}:{n}")


def read_scans(path) -> list[RadarScan]:
    return list(iter_scans(path))
