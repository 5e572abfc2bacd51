"""Run the optimiser on synthetic scenes and score the result against ground truth."""

from __future__ import annotations

from dataclasses import replace
from typing import Dict, Optional

import numpy as np

from .metrics import DYNAMIC_THRESHOLD, adjusted_rand_index, threeway
from .optimize import ABLATIONS, RunConfig, run_sequence
from .synth import SceneSpec, generate, object_ids


def evaluate_scene(spec: SceneSpec, config: RunConfig = RunConfig(), pair: Optional[int] = None,
                   true_ego: bool = False, dynamic_threshold: float = DYNAMIC_THRESHOLD):
    """Optimise one pair of ``spec`` (default: the last) and score it.

    With ``true_ego`` the generator's ego motion replaces ICP. Returns
    ``(RunResult, ThreewayReport, adjusted Rand index vs. generating objects)``.
    """
    frames = generate(spec)
    t = len(frames) - 2 if pair is None else pair
    steps = [spec.ego_motion.inverse()] * (len(frames) - 1) if true_ego else None
    result = run_sequence(frames, config, steps=steps, pairs=[t])[0]
    source = result.source
    report = threeway(result.flow, source.gt_flow, source.is_foreground, dynamic_threshold)
    ari = adjusted_rand_index(result.clusters.labels, object_ids(spec, t))
    return result, report, ari


def ablation_config(name: str, base: RunConfig = RunConfig()) -> RunConfig:
    return replace(base, **ABLATIONS[name])


def pooled_dynamic_epe(runs) -> float:
    """Dynamic-foreground EPE pooled over the points of several scene reports."""
    total = count = 0.0
    for report in runs:
        dyn = report.dynamic_foreground
        if dyn.count:
            total += dyn.epe * dyn.count
            count += dyn.count
    return total / count if count else float("nan")


def run_ablations(suite, base: RunConfig = RunConfig(), names=("a", "b", "c", "d")) -> Dict[str, dict]:
    """Per-ablation scene reports and pooled dynamic EPE over ``suite``."""
    out = {}
    for name in names:
        cfg = ablation_config(name, base)
        reports = {scene: evaluate_scene(spec, cfg)[1] for spec, scene in suite}
        out[name] = {"reports": reports, "dynamic_epe": pooled_dynamic_epe(reports.values())}
    return out
