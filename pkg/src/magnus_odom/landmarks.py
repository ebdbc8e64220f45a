"""Landmark map: homogeneous world points with hit counts, ages and position covariances."""

from __future__ import annotations

import numpy as np

from .measurement import MapPoint


class LandmarkMap:
    """Struct-of-arrays point map; ids are unique and never reused."""

    def __init__(self, positions=None, ids=None, hits=None, last_seen=None, covariances=None):
        pos = np.zeros((0, 3)) if positions is None else np.asarray(positions, dtype=float).reshape(-1, 3)
        n = pos.shape[0]
        self.positions = pos.copy()
        # world-frame position covariance; zero means "known exactly"
        self.covariances = (
            np.zeros((n, 3, 3)) if covariances is None else np.asarray(covariances, dtype=float).reshape(n, 3, 3).copy()
        )
        self.ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64).copy()
        self.hits = np.ones(n, dtype=np.int64) if hits is None else np.asarray(hits, dtype=np.int64).copy()
        self.last_seen = (
            np.zeros(n, dtype=np.int64) if last_seen is None else np.asarray(last_seen, dtype=np.int64).copy()
        )
        if len(np.unique(self.ids)) != n:
            raise ValueError("map point ids must be unique")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("map point coordinates must be finite")
        self.next_id = int(self.ids.max()) + 1 if n else 0

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_points(cls, points: list[MapPoint]) -> LandmarkMap:
        if not points:
            return cls()
        return cls(
            np.array([p.position[:3] for p in points]),
            [p.id for p in points],
            [p.hits for p in points],
            [p.last_seen for p in points],
        )

    def point(self, i: int) -> MapPoint:
        return MapPoint(np.append(self.positions[i], 1.0), int(self.ids[i]), int(self.hits[i]), int(self.last_seen[i]))

    def points(self) -> list[MapPoint]:
        return [self.point(i) for i in range(len(self))]

    def homogeneous(self) -> np.ndarray:
        return np.hstack([self.positions, np.ones((len(self), 1))])

    def index_of(self, ids) -> np.ndarray:
        order = np.argsort(self.ids)
        pos = np.searchsorted(self.ids, ids, sorter=order)
        return order[pos]

    def add(self, positions, frame: int, covariances=None) -> np.ndarray:
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        n = positions.shape[0]
        covs = np.zeros((n, 3, 3)) if covariances is None else np.asarray(covariances, dtype=float).reshape(n, 3, 3)
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        self.positions = np.vstack([self.positions, positions])
        self.covariances = np.concatenate([self.covariances, covs])
        self.ids = np.concatenate([self.ids, new_ids])
        self.hits = np.concatenate([self.hits, np.ones(n, dtype=np.int64)])
        self.last_seen = np.concatenate([self.last_seen, np.full(n, frame, dtype=np.int64)])
        return new_ids

    def mark_matched(self, ids, frame: int) -> None:
        if len(ids) == 0:
            return
        idx = self.index_of(ids)
        self.hits[idx] += 1
        self.last_seen[idx] = frame

    def fuse(self, ids, positions, covariances) -> None:
        """Information-form update of existing points with new position observations.

        Points with a zero covariance are treated as exact and left alone.
        """
        if len(ids) == 0:
            return
        idx = self.index_of(ids)
        known = np.abs(self.covariances[idx]).sum(axis=(1, 2)) > 0
        idx, positions, covariances = idx[known], positions[known], covariances[known]
        if len(idx) == 0:
            return
        info_new = np.linalg.inv(covariances)
        info_old = np.linalg.inv(self.covariances[idx])
        info = info_old + info_new
        rhs = np.einsum("nij,nj->ni", info_old, self.positions[idx]) + np.einsum("nij,nj->ni", info_new, positions)
        cov = np.linalg.inv(info)
        self.positions[idx] = np.einsum("nij,nj->ni", cov, rhs)
        self.covariances[idx] = 0.5 * (cov + np.swapaxes(cov, 1, 2))

    def keep(self, mask: np.ndarray) -> None:
        self.positions = self.positions[mask]
        self.covariances = self.covariances[mask]
        self.ids = self.ids[mask]
        self.hits = self.hits[mask]
        self.last_seen = self.last_seen[mask]

    def enforce_cap(self, cap: int, protect=None) -> int:
        """Evict lowest-hit, then least recently seen points until ``len <= cap``.

        Points listed in ``protect`` (ids) are evicted last.  Returns the
        number of evicted points.
        """
        excess = len(self) - cap
        if excess <= 0:
            return 0
        prot = np.zeros(len(self), dtype=bool)
        if protect is not None and len(protect):
            prot[np.isin(self.ids, protect)] = True
        # lexsort: last key is primary
        order = np.lexsort((self.ids, self.last_seen, self.hits, prot))
        mask = np.ones(len(self), dtype=bool)
        mask[order[:excess]] = False
        self.keep(mask)
        return excess

    def copy(self) -> LandmarkMap:
        m = LandmarkMap(self.positions, self.ids, self.hits, self.last_seen, self.covariances)
        m.next_id = self.next_id
        return m
