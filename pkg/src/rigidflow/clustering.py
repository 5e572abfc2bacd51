"""Hard (Euclidean, spatio-temporal) and soft (k-NN) rigid clusters, and flow-guided merging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .cloud import TimedPointCloud, as_points
from .spatial import SpatialIndex


@dataclass(frozen=True)
class ClusterConfig:
    radius: float = 0.3
    horizon: int = 5
    k: int = 16
    merge_vote_fraction: float = 0.6
    merge_dist_cap: float = 0.5
    merge_period: int = 100

    def __post_init__(self):
        # radius 0 is allowed: every point becomes its own cluster
        if self.radius < 0 or self.horizon < 1 or self.k < 1:
            raise ValueError("need radius >= 0, horizon >= 1, k >= 1")
        if not 0.5 < self.merge_vote_fraction <= 1.0:
            raise ValueError("merge_vote_fraction must lie in (0.5, 1]")
        if self.merge_dist_cap <= 0 or self.merge_period < 1:
            raise ValueError("merge_dist_cap and merge_period must be positive")


@dataclass(frozen=True, eq=False)
class HardClustering:
    """Partition of a cloud's points; ``labels`` are compact ``0..num_clusters-1``."""

    labels: np.ndarray
    num_clusters: int

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(lab) and (lab.min() < 0 or lab.max() >= self.num_clusters):
            raise ValueError("labels must lie in [0, num_clusters)")
        if len(np.unique(lab)) != self.num_clusters:
            raise ValueError("labels are not compact")
        lab = lab.copy()
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.labels)

    def members(self):
        """Point indices of each cluster, in label order."""
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(np.bincount(self.labels, minlength=self.num_clusters))[:-1]
        return np.split(order, bounds)


@dataclass(frozen=True, eq=False)
class SoftCluster:
    anchor: int
    members: np.ndarray


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller index as root so results do not depend on call order
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def roots(self) -> np.ndarray:
        return np.array([self.find(i) for i in range(len(self.parent))], dtype=np.int64)


def relabel_compact(labels) -> HardClustering:
    """Renumber labels to ``0..C-1`` in order of each cluster's lowest member index."""
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(lab) == 0:
        return HardClustering(lab, 0)
    uniq, first, inverse = np.unique(lab, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(uniq))
    return HardClustering(rank[inverse.reshape(-1)], len(uniq))


def euclidean_clusters(points, radius: float) -> HardClustering:
    """Connected components of the graph joining points at distance ``<= radius``."""
    pts = as_points(points)
    n = len(pts)
    if n == 0:
        return HardClustering(np.zeros(0, dtype=np.int64), 0)
    pairs = SpatialIndex(pts).pairs_within(radius)
    graph = coo_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return relabel_compact(comp)


def spatiotemporal_hard_clusters(window: Sequence[TimedPointCloud], config: ClusterConfig = ClusterConfig()) -> HardClustering:
    """Euclidean clustering of the accumulated window, restricted to its last frame.

    ``window`` holds ego-compensated frames ordered in time and ending with the
    frame being clustered; only the trailing ``config.horizon`` frames are used.
    Points of earlier frames can bridge gaps between parts of the same object.
    """
    if not window:
        raise ValueError("window must contain at least the source frame")
    frames = list(window)[-config.horizon:]
    target = frames[-1]
    stacked = np.concatenate([f.points for f in frames], axis=0)
    full = euclidean_clusters(stacked, config.radius)
    return relabel_compact(full.labels[len(stacked) - len(target):])


def soft_clusters(cloud, k: int) -> np.ndarray:
    """k-NN neighbourhood of every point.

    Returns an ``(N, k + 1)`` index array whose row ``m`` is ``m`` followed by
    its ``k`` nearest other points, ascending by distance (ties: lower index).
    """
    pts = cloud.points if isinstance(cloud, TimedPointCloud) else as_points(cloud)
    n = len(pts)
    if k < 1 or n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points for soft clusters, got {n}")
    idx, _ = SpatialIndex(pts).knn_many(pts, k + 1)
    anchors = np.arange(n)
    not_self = idx != anchors[:, None]
    # drop the anchor if present, otherwise the farthest candidate
    drop = np.where(not_self.all(axis=1), k, np.argmin(not_self, axis=1))
    keep = np.ones_like(idx, dtype=bool)
    keep[anchors, drop] = False
    neighbours = idx[keep].reshape(n, k)
    return np.concatenate([anchors[:, None], neighbours], axis=1)


def soft_cluster_list(members: np.ndarray):
    return [SoftCluster(int(row[0]), row) for row in members]


def merge_clusters(hard: HardClustering, points, flow, q_clustering: HardClustering,
                   q_index: SpatialIndex, config: ClusterConfig = ClusterConfig()) -> HardClustering:
    """Merge hard clusters whose warped points land in the same target cluster.

    Every source point ``p + f`` votes for the cluster of its nearest target
    point when that point is within ``config.merge_dist_cap``. A hard cluster
    is assigned the target cluster holding at least ``merge_vote_fraction`` of
    its votes; clusters assigned the same target cluster are merged.
    """
    pts = as_points(points)
    f = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    if len(pts) != len(f) or len(hard) != len(pts):
        raise ValueError("points, flow and hard labels must be aligned")
    if len(q_clustering) != len(q_index):
        raise ValueError("q_clustering must be aligned with the target index")
    if len(pts) == 0 or len(q_index) == 0:
        return hard
    nn, dist = q_index.nearest_many(pts + f)
    voting = dist <= config.merge_dist_cap
    src = hard.labels[voting]
    dst = q_clustering.labels[nn[voting]]
    if len(src) == 0:
        return hard
    pair, counts = np.unique(np.stack([src, dst], axis=1), axis=0, return_counts=True)
    cast = np.bincount(src, minlength=hard.num_clusters)
    # rows are sorted by (src, dst); stable argsort on -counts keeps the lowest dst on ties
    order = np.lexsort((pair[:, 1], -counts, pair[:, 0]))
    pair, counts = pair[order], counts[order]
    first = np.ones(len(pair), dtype=bool)
    first[1:] = pair[1:, 0] != pair[:-1, 0]
    winners, win_counts = pair[first], counts[first]
    accepted = win_counts >= config.merge_vote_fraction * cast[winners[:, 0]]
    uf = UnionFind(hard.num_clusters)
    owner = {}
    for h, q in winners[accepted]:
        if q in owner:
            uf.union(owner[q], int(h))
        else:
            owner[q] = int(h)
    return relabel_compact(uf.roots()[hard.labels])
