"""Exact nearest-neighbour, k-NN and fixed-radius queries over 3D points.

Backed by :class:`scipy.spatial.cKDTree` for candidate generation. Final
distances are recomputed here and ties are broken by the lowest point index,
so results are identical to a brute-force linear scan.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

# candidate search radii are inflated by this much so that rounding inside the
# tree can never drop a point the exact distance would keep
_REL_SLACK = 1e-9
_ABS_SLACK = 1e-12


class EmptyIndexError(ValueError):
    pass


def _inflate(r):
    return r * (1.0 + _REL_SLACK) + _ABS_SLACK


def point_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``points`` and ``query`` (broadcast)."""
    diff = points - query
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


class SpatialIndex:
    """Immutable index over a fixed list of 3D points."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 3))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self.points = np.ascontiguousarray(pts)
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points) if len(pts) else None

    def __len__(self) -> int:
        return len(self.points)

    def _check(self):
        if self._tree is None:
            raise EmptyIndexError("query on an empty index")

    def nearest(self, query):
        """Index and distance of the point closest to ``query``."""
        idx, dist = self.knn(query, 1)
        return int(idx[0]), float(dist[0])

    def knn(self, query, k: int):
        """The ``k`` closest points as ``(indices, distances)``, ascending."""
        self._check()
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside [1, {n}]")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        if k == n:
            cand = np.arange(n)
        else:
            dk, _ = self._tree.query(q, k=[k])
            cand = np.asarray(self._tree.query_ball_point(q, _inflate(float(dk[0]))), dtype=np.int64)
        d = point_distances(self.points[cand], q)
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]

    def radius(self, query, r: float) -> np.ndarray:
        """Indices with distance ``<= r`` from ``query``, ascending by index."""
        if r < 0:
            raise ValueError("radius must be non-negative")
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        q = np.asarray(query, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, _inflate(r)), dtype=np.int64)
        cand = cand[point_distances(self.points[cand], q) <= r]
        return np.sort(cand)

    def knn_many(self, queries, k: int):
        """Vectorised :meth:`knn` for an ``(M, 3)`` query array.

        Returns ``(M, k)`` index and distance arrays.
        """
        self._check()
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside [1, {n}]")
        qs = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        m = len(qs)
        if m == 0:
            return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))
        kk = min(k + 1, n)
        tree_d, cand = self._tree.query(qs, k=kk)
        tree_d = tree_d.reshape(m, kk)
        cand = cand.reshape(m, kk).astype(np.int64)
        if kk > k:
            # a (k+1)-th candidate tied with the k-th means the top-k set is ambiguous
            ambiguous = tree_d[:, k] <= _inflate(tree_d[:, k - 1])
            cand = cand[:, :k]
        else:
            ambiguous = np.zeros(m, dtype=bool)
        d = point_distances(self.points[cand], qs[:, None, :])
        order = np.lexsort((cand, d), axis=-1)
        idx = np.take_along_axis(cand, order, axis=1)
        dist = np.take_along_axis(d, order, axis=1)
        for row in np.flatnonzero(ambiguous):
            idx[row], dist[row] = self.knn(qs[row], k)
        return idx, dist

    def nearest_many(self, queries):
        """Nearest point for every query row: ``(indices, distances)``."""
        idx, dist = self.knn_many(queries, 1)
        return idx[:, 0], dist[:, 0]

    def pairs_within(self, r: float) -> np.ndarray:
        """All index pairs ``(i, j)``, ``i < j``, with distance ``<= r``."""
        if r < 0:
            raise ValueError("radius must be non-negative")
        if self._tree is None or len(self.points) < 2:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = self._tree.query_pairs(_inflate(r), output_type="ndarray").astype(np.int64)
        if len(pairs) == 0:
            return pairs.reshape(0, 2)
        d = point_distances(self.points[pairs[:, 0]], self.points[pairs[:, 1]])
        pairs = pairs[d <= r]
        pairs.sort(axis=1)
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def build(points) -> SpatialIndex:
    return SpatialIndex(points)
