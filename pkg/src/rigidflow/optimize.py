"""Adam over the flow field and the joint flow / rigid-cluster optimisation loop."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .cloud import RigidTransform, TimedPointCloud
from .clustering import (ClusterConfig, HardClustering, merge_clusters, soft_clusters,
                         spatiotemporal_hard_clusters)
from .egomotion import IcpConfig, apply_transform, icp
from .losses import HardEdges, LossConfig, total_loss
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 0.004
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamState":
        params = np.asarray(params, dtype=np.float64)
        return cls(np.zeros_like(params), np.zeros_like(params), **hyper)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update. Returns ``(new_state, new_params)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, "
                         f"state {state.first_moment.shape}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return replace(state, first_moment=m, second_moment=v, step_count=t), new_params


@dataclass(frozen=True)
class RunConfig:
    max_iterations: int = 1500
    convergence_tol: float = 1e-6
    convergence_window: int = 25
    lr: float = 0.004
    loss: LossConfig = field(default_factory=LossConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    enable_hard: bool = True
    enable_soft: bool = True
    enable_merge: bool = True
    reinit_after_merge: bool = False
    warped_index_period: int = 1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_window < 1 or self.warped_index_period < 1:
            raise ValueError("convergence_window and warped_index_period must be >= 1")


# component ablations: distance only, + hard, + soft, + merging
ABLATIONS = {
    "a": dict(enable_hard=False, enable_soft=False, enable_merge=False),
    "b": dict(enable_hard=True, enable_soft=False, enable_merge=False),
    "c": dict(enable_hard=True, enable_soft=True, enable_merge=False),
    "d": dict(enable_hard=True, enable_soft=True, enable_merge=True),
}


class TraceRow(NamedTuple):
    iteration: int
    total: float
    dist: float
    hard: float
    soft: float
    num_clusters: int


class MergeEvent(NamedTuple):
    iteration: int
    clusters_before: int
    clusters_after: int


@dataclass
class RunResult:
    flow: np.ndarray
    clusters: HardClustering
    loss_trace: List[TraceRow]
    merge_events: List[MergeEvent]
    iterations_run: int
    ego_transform: Optional[RigidTransform] = None
    source: Optional[TimedPointCloud] = None


class PairError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"pair {index}: {cause}")
        self.index = index
        self.cause = cause


def write_trace_csv(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TraceRow._fields)
        for row in trace:
            writer.writerow([row.iteration, repr(row.total), repr(row.dist), repr(row.hard),
                             repr(row.soft), row.num_clusters])


def _converged(totals: List[float], window: int, tol: float) -> bool:
    if len(totals) < 2 * window:
        return False
    prev = np.mean(totals[-window - 1:-1])
    cur = np.mean(totals[-window:])
    return abs(cur - prev) <= tol * max(abs(prev), 1e-12)


def run_pair(window: Sequence[TimedPointCloud], target: TimedPointCloud,
             q_window: Optional[Sequence[TimedPointCloud]] = None,
             config: RunConfig = RunConfig()) -> RunResult:
    """Estimate flow from the last frame of ``window`` to ``target``.

    All frames must already be ego-compensated into the target's coordinates.
    ``q_window`` (frames ending at ``target``) provides the target-side
    clusters used for merging and defaults to ``[target]``.
    """
    if not window:
        raise ValueError("window must end with the source frame")
    source = window[-1]
    p = source.points
    q = target.points
    if len(p) == 0 or len(q) == 0:
        raise ValueError("source and target must be non-empty")
    q_window = list(q_window) if q_window else [target]
    ccfg = config.cluster
    lcfg = config.loss
    if not config.enable_hard:
        lcfg = replace(lcfg, beta=0.0)
    if not config.enable_soft:
        lcfg = replace(lcfg, gamma=0.0)

    hard = spatiotemporal_hard_clusters(window, ccfg)
    soft = None
    if config.enable_soft and len(p) >= 2:
        soft = soft_clusters(p, min(ccfg.k, len(p) - 1))
    q_index = SpatialIndex(q)
    q_clusters = spatiotemporal_hard_clusters(q_window, ccfg) if config.enable_merge else None
    edges = HardEdges(hard, lcfg.edge_budget, lcfg.rng_seed) if lcfg.beta > 0 else None
    # convergence is judged on the loss above its floor; the soft term alone sits near -log(k+1)
    floor = -lcfg.gamma * np.log(soft.shape[1]) if soft is not None else 0.0

    flow = np.zeros_like(p)
    state = AdamState.zeros_like(flow, lr=config.lr)
    trace: List[TraceRow] = []
    merges: List[MergeEvent] = []
    totals: List[float] = []
    warped_index = None
    it = 0
    for it in range(1, config.max_iterations + 1):
        if config.warped_index_period > 1 and (it - 1) % config.warped_index_period == 0:
            warped_index = SpatialIndex(p + flow)
        report = total_loss(p, flow, q, hard, soft, q_index, lcfg, step=it,
                            hard_edges=edges, warped_index=warped_index)
        trace.append(TraceRow(it, report.total, report.dist_term, report.hard_term,
                              report.soft_term, hard.num_clusters))
        totals.append(report.total - floor)
        state, flow = adam_step(state, flow, report.gradient)
        if config.enable_merge and it % ccfg.merge_period == 0:
            merged = merge_clusters(hard, p, flow, q_clusters, q_index, ccfg)
            merges.append(MergeEvent(it, hard.num_clusters, merged.num_clusters))
            if merged.num_clusters != hard.num_clusters:
                logger.debug("iteration %d: merged %d -> %d clusters", it,
                             hard.num_clusters, merged.num_clusters)
                hard = merged
                if edges is not None:
                    edges = HardEdges(hard, lcfg.edge_budget, lcfg.rng_seed)
                if config.reinit_after_merge:
                    flow = np.zeros_like(p)
                    state = AdamState.zeros_like(flow, lr=config.lr)
        if _converged(totals, config.convergence_window, config.convergence_tol):
            logger.debug("converged after %d iterations", it)
            break
    return RunResult(flow, hard, trace, merges, it, source=source)


def pair_windows(frames: Sequence[TimedPointCloud], steps: Sequence[RigidTransform], t: int, horizon: int):
    """Source and target windows of pair ``t``, expressed in frame ``t + 1`` coordinates."""
    first = max(t - horizon + 1, 0)
    to_target = {t + 1: RigidTransform.identity()}
    for s in range(t, first - 1, -1):
        to_target[s] = to_target[s + 1].compose(steps[s])
    window = [apply_transform(frames[s], to_target[s]) for s in range(first, t + 1)]
    q_first = max(t + 2 - horizon, 0)
    q_window = [apply_transform(frames[s], to_target[s]) for s in range(q_first, t + 2)]
    return window, q_window


def run_sequence(frames: Sequence[TimedPointCloud], config: RunConfig = RunConfig(),
                 jobs: int = 1, steps: Optional[Sequence[RigidTransform]] = None,
                 pairs: Optional[Sequence[int]] = None) -> List[RunResult]:
    """Run :func:`run_pair` on every consecutive pair after ICP ego-compensation.

    ``steps`` may supply the frame-to-frame transforms instead of estimating
    them; ``pairs`` restricts which pair indices are optimised. Pairs are
    independent and may run on ``jobs`` threads; results are returned in pair
    order.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if steps is None:
        steps = []
        for t in range(len(frames) - 1):
            try:
                steps.append(icp(frames[t], frames[t + 1], config.icp)[0])
            except Exception as exc:
                raise PairError(t, exc) from exc

    def one(t):
        try:
            window, q_window = pair_windows(frames, steps, t, config.cluster.horizon)
            result = run_pair(window, q_window[-1], q_window, config)
        except Exception as exc:
            raise PairError(t, exc) from exc
        result.ego_transform = steps[t]
        return result

    pairs = range(len(frames) - 1) if pairs is None else list(pairs)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, pairs))
    return [one(t) for t in pairs]
