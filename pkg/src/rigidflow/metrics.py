"""Scene-flow evaluation: EPE, accuracies, outliers, angle error and bucketed reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

# thresholds (meters / ratios) of the standard scene-flow metrics
STRICT_ABS, STRICT_REL = 0.05, 0.05
RELAXED_ABS, RELAXED_REL = 0.1, 0.10
OUTLIER_ABS, OUTLIER_REL = 0.3, 0.10
DYNAMIC_THRESHOLD = 0.05


@dataclass(frozen=True)
class FlowMetrics:
    """Aggregate errors over ``count`` points; every statistic is None when count is 0."""

    epe: Optional[float]
    acc_strict: Optional[float]
    acc_relaxed: Optional[float]
    outliers: Optional[float]
    angle_error: Optional[float]
    count: int

    def as_row(self):
        return (self.epe, self.acc_strict, self.acc_relaxed, self.outliers, self.angle_error, self.count)


@dataclass(frozen=True)
class ThreewayReport:
    dynamic_foreground: FlowMetrics
    static_foreground: FlowMetrics
    static_background: FlowMetrics
    average_epe: Optional[float]

    def buckets(self):
        return {"dynamic_foreground": self.dynamic_foreground,
                "static_foreground": self.static_foreground,
                "static_background": self.static_background}


def _aligned(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {len(pred)} vectors, ground truth {len(gt)}")
    return pred, gt


def point_errors(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point end-point error and relative error (NaN where the gt flow is zero)."""
    pred, gt = _aligned(pred, gt)
    e = np.linalg.norm(pred - gt, axis=1)
    gt_norm = np.linalg.norm(gt, axis=1)
    e_rel = np.full_like(e, np.nan)
    nz = gt_norm > 0
    e_rel[nz] = e[nz] / gt_norm[nz]
    return e, e_rel


def angle_errors(pred, gt, homogeneous: bool = True) -> np.ndarray:
    """Angle (radians) between ``(f, 1)`` and ``(f_gt, 1)``, or between raw 3D vectors."""
    pred, gt = _aligned(pred, gt)
    if homogeneous:
        pred = np.hstack([pred, np.ones((len(pred), 1))])
        gt = np.hstack([gt, np.ones((len(gt), 1))])
    num = np.einsum("ij,ij->i", pred, gt)
    den = np.linalg.norm(pred, axis=1) * np.linalg.norm(gt, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.clip(num / den, -1.0, 1.0)
    ang = np.arccos(cos)
    # identical vectors give exactly zero even when rounding puts cos a hair below 1
    ang[np.all(pred == gt, axis=1)] = 0.0
    return ang


def flow_metrics(pred, gt, mask=None, homogeneous: bool = True) -> FlowMetrics:
    pred, gt = _aligned(pred, gt)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if len(mask) != len(pred):
            raise ValueError("mask is not aligned with the flow")
        pred, gt = pred[mask], gt[mask]
    n = len(pred)
    if n == 0:
        return FlowMetrics(None, None, None, None, None, 0)
    e, e_rel = point_errors(pred, gt)
    defined = ~np.isnan(e_rel)
    rel = np.where(defined, e_rel, 0.0)
    strict = (e < STRICT_ABS) | (defined & (rel < STRICT_REL))
    relaxed = (e < RELAXED_ABS) | (defined & (rel < RELAXED_REL))
    outlier = (e > OUTLIER_ABS) | (defined & (rel > OUTLIER_REL))
    ang = angle_errors(pred, gt, homogeneous)
    ang_mean = float(np.nanmean(ang)) if np.any(~np.isnan(ang)) else None
    return FlowMetrics(float(e.mean()), float(strict.mean()), float(relaxed.mean()),
                       float(outlier.mean()), ang_mean, n)


def dynamic_mask(gt, dynamic_threshold: float = DYNAMIC_THRESHOLD) -> np.ndarray:
    return np.linalg.norm(np.asarray(gt, dtype=np.float64).reshape(-1, 3), axis=1) > dynamic_threshold


def threeway(pred, gt, is_foreground, dynamic_threshold: float = DYNAMIC_THRESHOLD,
             weighted: bool = False, homogeneous: bool = True) -> ThreewayReport:
    """Metrics on dynamic-foreground, static-foreground and static-background points.

    Dynamic background points belong to no bucket. ``average_epe`` is the
    mean of the defined bucket EPEs, unweighted unless ``weighted``.
    """
    pred, gt = _aligned(pred, gt)
    if dynamic_threshold <= 0:
        raise ValueError("dynamic_threshold must be positive")
    fg = np.asarray(is_foreground, dtype=bool).reshape(-1)
    if len(fg) != len(pred):
        raise ValueError("is_foreground is not aligned with the flow")
    dyn = dynamic_mask(gt, dynamic_threshold)
    buckets = [
        flow_metrics(pred, gt, dyn & fg, homogeneous),
        flow_metrics(pred, gt, ~dyn & fg, homogeneous),
        flow_metrics(pred, gt, ~dyn & ~fg, homogeneous),
    ]
    defined = [b for b in buckets if b.count > 0]
    if not defined:
        avg = None
    elif weighted:
        avg = float(sum(b.epe * b.count for b in defined) / sum(b.count for b in defined))
    else:
        avg = float(np.mean([b.epe for b in defined]))
    return ThreewayReport(*buckets, average_epe=avg)


def per_class(pred, gt, class_id, dynamic_threshold: float = DYNAMIC_THRESHOLD
              ) -> Dict[int, Tuple[Optional[float], Optional[float], Optional[float]]]:
    """``class -> (avg, dynamic EPE, static EPE)``; missing halves are None and skipped in avg."""
    pred, gt = _aligned(pred, gt)
    cls = np.asarray(class_id).reshape(-1)
    if len(cls) != len(pred):
        raise ValueError("class_id is not aligned with the flow")
    e, _ = point_errors(pred, gt)
    dyn = dynamic_mask(gt, dynamic_threshold)
    out = {}
    for c in np.unique(cls):
        sel = cls == c
        d = float(e[sel & dyn].mean()) if np.any(sel & dyn) else None
        s = float(e[sel & ~dyn].mean()) if np.any(sel & ~dyn) else None
        halves = [x for x in (d, s) if x is not None]
        out[int(c)] = (float(np.mean(halves)), d, s)
    return out


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two partitions of the same points."""
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if len(a) != len(b):
        raise ValueError("partitions must cover the same points")
    n = len(a)
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        x = x.astype(np.float64)
        return float(np.sum(x * (x - 1) / 2.0))

    index = pairs(table)
    sum_a = pairs(table.sum(axis=1))
    sum_b = pairs(table.sum(axis=0))
    total = n * (n - 1) / 2.0
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)
