"""Distance, hard-rigidity and soft-rigidity losses with analytic flow gradients.

All gradients treat nearest-neighbour correspondences and principal
eigenvectors as constants within one evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cloud import TimedPointCloud, as_points
from .clustering import HardClustering
from .spatial import SpatialIndex
from .spectral import batch_principal_eig


REWARD_METRICS = ("euclidean", "axis")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    theta: float = 0.03
    reward_floor: float = 1e-6
    edge_budget: int = 2048
    rng_seed: int = 0
    squared_distance: bool = True
    # "euclidean": compare pair lengths; "axis": compare per-axis extents
    reward_metric: str = "euclidean"

    def __post_init__(self):
        if self.reward_metric not in REWARD_METRICS:
            raise ValueError(f"reward_metric must be one of {REWARD_METRICS}")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if not 0.0 < self.reward_floor < 1.0:
            raise ValueError("reward_floor must lie in (0, 1)")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.edge_budget < 1:
            raise ValueError("edge_budget must be positive")


@dataclass(frozen=True, eq=False)
class LossReport:
    total: float
    dist_term: float
    hard_term: float
    soft_term: float
    gradient: np.ndarray


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, TimedPointCloud) else as_points(x)


def _scatter(n: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` into an ``(n, 3)`` array at ``idx`` (fixed order)."""
    idx = idx.reshape(-1)
    values = values.reshape(-1, 3)
    return np.stack([np.bincount(idx, weights=values[:, c], minlength=n) for c in range(3)], axis=1)


def _reward_parts(dp, dw, theta: float, metric: str, axis: int):
    """Unclipped rewards and their derivative w.r.t. the first point's flow.

    ``dp`` and ``dw`` hold pair differences before and after the flow, with
    coordinates along ``axis``.
    """
    if metric == "axis":
        delta = np.abs(dp) - np.abs(dw)
        raw = 1.0 - np.sum(delta * delta, axis=axis) / theta
        return raw, (2.0 / theta) * delta * np.sign(dw)
    len_p = np.sqrt(np.sum(dp * dp, axis=axis))
    len_w = np.sqrt(np.sum(dw * dw, axis=axis))
    delta = len_p - len_w
    raw = 1.0 - delta * delta / theta
    scale = np.where(len_w > 0.0, (2.0 / theta) * delta / np.where(len_w > 0.0, len_w, 1.0), 0.0)
    return raw, np.expand_dims(scale, axis) * dw


def pair_rewards(points, flow, i, j, theta: float, metric: str = "euclidean"):
    """Unclipped rigidity rewards of point pairs and their derivative w.r.t. ``f_i``.

    With ``w = p + f``, the euclidean metric gives
    ``r = 1 - (|p_i - p_j| - |w_i - w_j|)**2 / theta`` and the axis metric
    ``r = 1 - sum_u (|p_i - p_j|_u - |w_i - w_j|_u)**2 / theta``.
    The derivative w.r.t. ``f_j`` is the negation of the one returned.
    """
    p_i, p_j = points[i], points[j]
    w_diff = (p_i + flow[i]) - (p_j + flow[j])
    return _reward_parts(p_i - p_j, w_diff, theta, metric, axis=-1)


def reward(p_i, p_j, f_i, f_j, theta: float = 0.03, metric: str = "euclidean") -> float:
    """Rigidity reward of one point pair, clipped to ``[0, 1]``."""
    pts = np.array([p_i, p_j], dtype=np.float64)
    flow = np.array([f_i, f_j], dtype=np.float64)
    raw, _ = pair_rewards(pts, flow, np.array([0]), np.array([1]), theta, metric)
    return float(np.clip(raw[0], 0.0, 1.0))


def distance_correspondences(points, flow, target, q_index: Optional[SpatialIndex] = None,
                             warped_index: Optional[SpatialIndex] = None):
    """Nearest target point of each warped source point, and nearest warped point of each target."""
    p = _pts(points)
    q = _pts(target)
    w = p + flow
    q_index = q_index if q_index is not None else SpatialIndex(q)
    warped_index = warped_index if warped_index is not None else SpatialIndex(w)
    fwd, _ = q_index.nearest_many(w)
    bwd, _ = warped_index.nearest_many(q)
    return fwd, bwd


def distance_loss(points, flow, target, q_index: Optional[SpatialIndex] = None,
                  squared: bool = True, correspondences=None, warped_index=None):
    """Bidirectional (Chamfer) nearest-neighbour loss between ``P + F`` and ``Q``.

    Each direction is a mean over its points; ``squared`` selects squared vs
    plain Euclidean distances. ``correspondences`` may pass a frozen
    ``(forward, backward)`` nearest-neighbour assignment; otherwise it is
    recomputed, with the warped-source index rebuilt unless ``warped_index``
    is supplied.
    """
    p = _pts(points)
    q = _pts(target)
    f = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("distance loss needs non-empty source and target")
    if len(f) != len(p):
        raise ValueError("flow is not aligned with the source cloud")
    if correspondences is None:
        correspondences = distance_correspondences(p, f, q, q_index, warped_index)
    fwd, bwd = correspondences
    w = p + f
    diff_f = w - q[fwd]
    diff_b = q - w[bwd]
    n, m = len(p), len(q)
    if squared:
        value = np.einsum("ij,ij->", diff_f, diff_f) / n + np.einsum("ij,ij->", diff_b, diff_b) / m
        grad = 2.0 * diff_f / n
        grad += _scatter(n, bwd, -2.0 * diff_b / m)
    else:
        nf = np.linalg.norm(diff_f, axis=1)
        nb = np.linalg.norm(diff_b, axis=1)
        value = nf.mean() + nb.mean()
        with np.errstate(invalid="ignore", divide="ignore"):
            unit_f = np.where(nf[:, None] > 0, diff_f / nf[:, None], 0.0)
            unit_b = np.where(nb[:, None] > 0, diff_b / nb[:, None], 0.0)
        grad = unit_f / n + _scatter(n, bwd, -unit_b / m)
    return float(value), grad


def _pair_from_linear(t: np.ndarray, n: int):
    """Map linear indices over the strict upper triangle of an n x n matrix to (row, col)."""
    total = n * (n - 1) // 2
    # rows counted from the bottom: t' = total-1-t lies in row block r' with r'(r'+1)/2 <= t'
    tr = total - 1 - t
    rb = ((np.sqrt(8.0 * tr + 1.0) - 1.0) / 2.0).astype(np.int64)
    rb += ((rb + 1) * (rb + 2) // 2 <= tr).astype(np.int64)
    rb -= (rb * (rb + 1) // 2 > tr).astype(np.int64)
    row = n - 2 - rb
    start = row * (2 * n - row - 1) // 2
    col = row + 1 + (t - start)
    return row, col


class HardEdges:
    """Edge sets of every hard cluster, with per-cluster weights ``1 / |edges|``.

    Complete graphs within ``edge_budget`` are built once; larger clusters
    draw a fresh seeded sample of ``edge_budget`` edges for every ``step``.
    """

    def __init__(self, hard: HardClustering, edge_budget: int = 2048, rng_seed: int = 0):
        self.n = len(hard)
        self.budget = edge_budget
        self.seed = rng_seed
        fixed_i, fixed_j, fixed_w = [], [], []
        self.sampled = []
        for c, members in enumerate(hard.members()):
            size = len(members)
            n_edges = size * (size - 1) // 2
            if n_edges == 0:
                continue
            if n_edges <= edge_budget:
                a, b = np.triu_indices(size, 1)
                fixed_i.append(members[a])
                fixed_j.append(members[b])
                fixed_w.append(np.full(n_edges, 1.0 / n_edges))
            else:
                self.sampled.append((c, members))
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
        self.fixed = (cat(fixed_i, np.int64), cat(fixed_j, np.int64), cat(fixed_w, np.float64))

    def edges(self, step: int = 0):
        if not self.sampled:
            return self.fixed
        ii, jj, ww = [self.fixed[0]], [self.fixed[1]], [self.fixed[2]]
        for c, members in self.sampled:
            size = len(members)
            rng = np.random.default_rng([self.seed, step, c])
            t = rng.choice(size * (size - 1) // 2, size=self.budget, replace=False)
            a, b = _pair_from_linear(np.sort(t), size)
            ii.append(members[a])
            jj.append(members[b])
            ww.append(np.full(self.budget, 1.0 / self.budget))
        return np.concatenate(ii), np.concatenate(jj), np.concatenate(ww)


def hard_rigidity_loss(points, flow, hard: HardClustering, config: LossConfig = LossConfig(),
                       step: int = 0, edges: Optional[HardEdges] = None):
    """Sum over hard clusters of the mean ``-log r`` over the cluster's edges."""
    p = _pts(points)
    f = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    if len(hard) != len(p) or len(f) != len(p):
        raise ValueError("hard labels and flow must be aligned with the source cloud")
    if edges is None:
        edges = HardEdges(hard, config.edge_budget, config.rng_seed)
    i, j, weight = edges.edges(step)
    grad = np.zeros_like(p)
    if len(i) == 0:
        return 0.0, grad
    raw, d_raw = pair_rewards(p, f, i, j, config.theta, config.reward_metric)
    r = np.clip(raw, 0.0, 1.0)
    floored = r <= config.reward_floor
    value = float(np.sum(weight * -np.log(np.maximum(r, config.reward_floor))))
    coeff = np.where(floored, 0.0, -weight / np.where(floored, 1.0, r))
    g = coeff[:, None] * d_raw
    grad = _scatter(len(p), i, g) + _scatter(len(p), j, -g)
    return value, grad


def _pair_incidence(d: int):
    """Pairs ``a < b`` of ``d`` members and the ``(pairs, d)`` matrix with +1 at ``a`` and -1 at ``b``."""
    a, b = np.triu_indices(d, 1)
    s = np.zeros((len(a), d))
    rows = np.arange(len(a))
    s[rows, a] = 1.0
    s[rows, b] = -1.0
    return a, b, s


def _pair_differences(x: np.ndarray, members: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``x[m_a] - x[m_b]`` for every member pair of every anchor, as ``(3, N, pairs)``.

    One dense product with the +-1 incidence matrix; exact, since each output
    sums one positive and one negative entry.
    """
    n, d = members.shape
    xm = x[members].transpose(2, 0, 1).reshape(-1, d)
    return (xm @ s.T).reshape(3, n, -1)


def soft_reward_matrices(points, flow, members: np.ndarray, theta: float, metric: str = "euclidean"):
    """Reward matrices ``(N, k+1, k+1)`` of every soft cluster plus pieces for the gradient."""
    p = _pts(points)
    f = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    n, d = members.shape
    a, b, s = _pair_incidence(d)
    w_diff = _pair_differences(p + f, members, s)
    # derivative of raw w.r.t. the first member of each pair, component-major
    raw, d_raw = _reward_parts(_pair_differences(p, members, s), w_diff, theta, metric, axis=0)
    r = np.clip(raw, 0.0, 1.0)
    mats = np.ones((n, d, d))
    mats[:, a, b] = r
    mats[:, b, a] = r
    return mats, (a, b, s, raw, d_raw)


def soft_rigidity_loss(points, flow, members: np.ndarray, config: LossConfig = LossConfig(),
                       return_eig: bool = False):
    """Mean over soft clusters of ``-log`` of the principal eigenvalue of the reward matrix.

    The gradient uses ``d lam / d A_ab = v_a v_b`` with the eigenvector held
    fixed, which down-weights members the eigenvector treats as outliers.
    """
    p = _pts(points)
    members = np.asarray(members, dtype=np.int64)
    n_anchor, d = members.shape
    grad = np.zeros_like(p)
    if n_anchor == 0:
        return (0.0, grad, None) if return_eig else (0.0, grad)
    mats, (a, b, s, raw, d_raw) = soft_reward_matrices(p, flow, members, config.theta, config.reward_metric)
    lam, v, _ = batch_principal_eig(mats, strict=False, validate=False)
    value = float(np.mean(-np.log(np.maximum(lam, config.reward_floor))))
    d_lam = np.where(lam > config.reward_floor, -1.0 / (n_anchor * lam), 0.0)
    active = (raw > 0.0) & (raw < 1.0)
    coeff = d_lam[:, None] * 2.0 * v[:, a] * v[:, b] * active
    g = coeff * d_raw
    # +g to the first member of each pair, -g to the second, then onto the points
    slot = (g.reshape(-1, len(a)) @ s).reshape(3, -1)
    idx = members.reshape(-1)
    grad = np.stack([np.bincount(idx, weights=slot[c], minlength=len(p)) for c in range(3)], axis=1)
    if return_eig:
        return value, grad, (lam, v)
    return value, grad


def total_loss(points, flow, target, hard: Optional[HardClustering], soft: Optional[np.ndarray],
               q_index: Optional[SpatialIndex] = None, config: LossConfig = LossConfig(),
               step: int = 0, hard_edges: Optional[HardEdges] = None,
               warped_index: Optional[SpatialIndex] = None) -> LossReport:
    """Weighted sum of the three terms.

    A term whose weight is zero, or whose clusters are ``None``, is skipped
    and reported as zero.
    """
    p = _pts(points)
    f = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    grad = np.zeros_like(p)
    dist = hard_v = soft_v = 0.0
    if config.alpha > 0:
        dist, g = distance_loss(p, f, target, q_index, config.squared_distance, warped_index=warped_index)
        grad += config.alpha * g
    if config.beta > 0 and hard is not None:
        hard_v, g = hard_rigidity_loss(p, f, hard, config, step, hard_edges)
        grad += config.beta * g
    if config.gamma > 0 and soft is not None:
        soft_v, g = soft_rigidity_loss(p, f, soft, config)
        grad += config.gamma * g
    total = config.alpha * dist + config.beta * hard_v + config.gamma * soft_v
    return LossReport(float(total), float(dist), float(hard_v), float(soft_v), grad)
