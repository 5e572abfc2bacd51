"""Command-line driver: ``flow``, ``eval``, ``synth``, ``icp`` and ``cluster``.

Configuration is a flat mapping of dotted keys (``loss.theta``,
``cluster.radius`` ...). Values come from the module defaults, then a JSON
file (``--config`` or the ``LIF_CONFIG`` environment variable), then
command-line flags. Every key has a flag of the same name (``--loss.theta``)
and every flag has a key.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import synth
from .cloud import RigidTransform, load_cloud, load_flow, preprocess, save_cloud, save_flow
from .clustering import ClusterConfig, spatiotemporal_hard_clusters
from .egomotion import IcpConfig, apply_transform, icp
from .losses import LossConfig
from .metrics import DYNAMIC_THRESHOLD, flow_metrics, per_class, threeway
from .optimize import RunConfig, run_sequence, write_trace_csv

logger = logging.getLogger("rigidflow")

CONFIG_ENV = "LIF_CONFIG"
_NESTED = ("loss", "cluster", "icp")


def _section(prefix, cls, skip=()):
    return {f"{prefix}.{f.name}": f.default for f in dataclasses.fields(cls)
            if f.name not in skip and f.default is not dataclasses.MISSING}


def default_config() -> Dict[str, object]:
    """Every recognised key with its module default."""
    cfg: Dict[str, object] = {"seed": 0, "jobs": 1, "verbose": False}
    cfg.update(_section("icp", IcpConfig))
    cfg.update(_section("cluster", ClusterConfig))
    # the edge-sampling seed follows the top-level seed
    cfg.update(_section("loss", LossConfig, skip=("rng_seed",)))
    cfg.update(_section("run", RunConfig, skip=_NESTED))
    cfg.update({
        "preprocess.enabled": True,
        "preprocess.ground_height": 0.3,
        "preprocess.max_range": 35.0,
        "metrics.dynamic_threshold": DYNAMIC_THRESHOLD,
        "metrics.weighted": False,
        "metrics.homogeneous": True,
        "io.format": "binary",
        "io.out": "",
        "io.csv": "",
    })
    return cfg


class ConfigError(ValueError):
    pass


def _parse_bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(key: str, value, defaults: Dict[str, object]):
    """Convert ``value`` to the type of ``key``'s default, rejecting unknown keys."""
    if key not in defaults:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(defaults[key])
    try:
        if kind is bool:
            return _parse_bool(value)
        if isinstance(value, bool):
            raise ValueError("booleans are only valid for on/off keys")
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def load_config_file(path) -> Dict[str, object]:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object of dotted keys")
    return data


def resolve_config(args: argparse.Namespace, environ=None) -> Dict[str, object]:
    """Defaults, then the config file, then explicit flags."""
    environ = os.environ if environ is None else environ
    defaults = default_config()
    cfg = dict(defaults)
    path = vars(args).get("config") or environ.get(CONFIG_ENV)
    if path:
        for key, value in load_config_file(path).items():
            cfg[key] = coerce(key, value, defaults)
    # flags are stored under their dotted key and are absent unless given
    for key, value in vars(args).items():
        if key in defaults:
            cfg[key] = coerce(key, value, defaults)
    return cfg


def _pick(cfg, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def run_config(cfg: Dict[str, object]) -> RunConfig:
    try:
        return RunConfig(loss=LossConfig(rng_seed=cfg["seed"], **_pick(cfg, "loss")),
                         cluster=ClusterConfig(**_pick(cfg, "cluster")),
                         icp=IcpConfig(**_pick(cfg, "icp")),
                         **_pick(cfg, "run"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    defaults = default_config()
    common = argparse.ArgumentParser(add_help=False)
    glob = common.add_argument_group("global")
    # defaults are suppressed so a subcommand's namespace never masks a flag given before it
    glob.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                      help=f"JSON config of dotted keys (fallback: ${CONFIG_ENV})")
    glob.add_argument("--seed", metavar="N", default=argparse.SUPPRESS)
    glob.add_argument("--jobs", metavar="N", default=argparse.SUPPRESS)
    glob.add_argument("--verbose", action="store_const", const=True, default=argparse.SUPPRESS)
    keys = common.add_argument_group("config keys (each also accepted in the config file)")
    for key, value in defaults.items():
        if key in ("seed", "jobs", "verbose"):
            continue
        kind = "BOOL" if isinstance(value, bool) else type(value).__name__.upper()
        flags = [f"--{key}"] + (["-o", "--out"] if key == "io.out" else [])
        keys.add_argument(*flags, dest=key, metavar=kind, default=argparse.SUPPRESS,
                          help=f"default: {value!r}")

    parser = argparse.ArgumentParser(prog="rigidflow", parents=[common],
                                     description="Scene flow with rigid-cluster regularisation.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("flow", parents=[common], help="estimate flow for consecutive frames")
    p.add_argument("frames", nargs="+", help="ordered frame files")
    p = sub.add_parser("eval", parents=[common], help="score a .liff prediction against a cloud's gt flow")
    p.add_argument("pred")
    p.add_argument("cloud")
    p = sub.add_parser("synth", parents=[common], help="write a synthetic scene as .lifc frames")
    p.add_argument("scene", choices=sorted(synth.SCENES))
    p = sub.add_parser("icp", parents=[common], help="register SRC onto DST and print the transform")
    p.add_argument("src")
    p.add_argument("dst")
    p = sub.add_parser("cluster", parents=[common], help="spatio-temporal hard clusters of the last frame")
    p.add_argument("frames", nargs="+", help="ordered frame files; the last one is labelled")
    return parser


def _load_frames(paths, cfg):
    """Load and optionally preprocess; failures become ``None`` entries.

    Returns the clouds, the kept original indices, the original point counts
    and a map of frame index to error message.
    """
    frames, keeps, sizes, errors = [], [], [], {}
    for k, path in enumerate(paths):
        try:
            cloud = load_cloud(path, cfg["io.format"])
        except (OSError, ValueError) as exc:
            errors[k] = f"{path}: {exc}"
            frames.append(None)
            keeps.append(None)
            sizes.append(0)
            continue
        sizes.append(len(cloud))
        if cfg["preprocess.enabled"]:
            cloud, keep = preprocess(cloud, cfg["preprocess.ground_height"], cfg["preprocess.max_range"])
        else:
            keep = np.arange(len(cloud))
        frames.append(cloud)
        keeps.append(keep)
    return frames, keeps, sizes, errors


def _expand(values, keep, n, fill):
    out = np.full((n,) + values.shape[1:], fill, dtype=values.dtype)
    out[keep] = values
    return out


def _full_labels(labels, num_clusters, keep, n):
    """Labels for all ``n`` original points; filtered points become singletons after the kept ones."""
    out = np.empty(n, dtype=np.int64)
    dropped = np.setdiff1d(np.arange(n), keep)
    out[keep] = labels
    out[dropped] = num_clusters + np.arange(len(dropped))
    return out


def _write_manifest(out_dir: Path, rows):
    lines = [f"{name}\t{status}" for name, status in rows]
    (out_dir / "MANIFEST").write_text("\n".join(lines) + ("\n" if lines else ""))


def cmd_flow(paths: List[str], cfg: Dict[str, object]) -> int:
    if len(paths) < 2:
        logger.error("flow needs at least two frames")
        return 2
    if not cfg["io.out"]:
        logger.error("flow needs an output directory (--out)")
        return 2
    out_dir = Path(cfg["io.out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    config = run_config(cfg)
    frames, keeps, sizes, errors = _load_frames(paths, cfg)

    # ego motion per consecutive pair; a failed load or registration breaks the sequence
    steps: Dict[int, RigidTransform] = {}
    for t in range(len(paths) - 1):
        if frames[t] is None or frames[t + 1] is None:
            continue
        try:
            steps[t] = icp(frames[t], frames[t + 1], config.icp)[0]
        except Exception as exc:
            errors.setdefault(t, f"pair {t}: ego-motion failed: {exc}")

    def run(t):
        if t not in steps:
            raise RuntimeError(errors.get(t + 1) or errors.get(t) or f"pair {t}: frames unavailable")
        first = t
        while first - 1 in steps and t - first + 1 < config.cluster.horizon:
            first -= 1
        seg = frames[first:t + 2]
        seg_steps = [steps[s] for s in range(first, t + 1)]
        return run_sequence(seg, config, steps=seg_steps, pairs=[t - first])[0]

    def guarded(t):
        try:
            return t, run(t), None
        except Exception as exc:
            return t, None, exc

    pairs = range(len(paths) - 1)
    if cfg["jobs"] > 1:
        with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
            outcomes = list(pool.map(guarded, pairs))
    else:
        outcomes = [guarded(t) for t in pairs]

    manifest = []
    failed = bool(errors)
    for msg in errors.values():
        logger.error("%s", msg)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "iterations", "final_loss", "num_clusters"])
        for t, result, exc in outcomes:
            name = f"pair_{t:04d}.liff"
            if exc is not None:
                logger.error("pair %d failed: %s", t, exc)
                manifest.append((name, "failed"))
                failed = True
                continue
            n = sizes[t]
            flow = _expand(result.flow, keeps[t], n, 0.0)
            labels = _full_labels(result.clusters.labels, result.clusters.num_clusters, keeps[t], n)
            save_flow(out_dir / name, flow, labels)
            write_trace_csv(out_dir / f"trace_{t:04d}.csv", result.loss_trace)
            back, back_labels = load_flow(out_dir / name)
            if not (np.array_equal(back, flow.astype(np.float32).astype(np.float64))
                    and np.array_equal(back_labels, labels)):
                logger.error("pair %d: written flow failed validation", t)
                manifest.append((name, "invalid"))
                failed = True
                continue
            final = result.loss_trace[-1].total if result.loss_trace else float("nan")
            writer.writerow([t, result.iterations_run, repr(final), result.clusters.num_clusters])
            print(f"pair {t}: iterations {result.iterations_run}  final loss {final:.6g}  "
                  f"clusters {result.clusters.num_clusters}")
            manifest.append((name, "completed"))
            _write_manifest(out_dir, manifest)
    _write_manifest(out_dir, manifest)
    return 1 if failed else 0


def _fmt(x, width=9, digits=4):
    return f"{'-':>{width}}" if x is None else f"{x:>{width}.{digits}f}"


def _metrics_row(name, m):
    return (f"{name:<20}{_fmt(m.epe)}{_fmt(m.acc_strict)}{_fmt(m.acc_relaxed)}"
            f"{_fmt(m.outliers)}{_fmt(m.angle_error)}{m.count:>8d}")


def cmd_eval(pred_path: str, cloud_path: str, cfg: Dict[str, object]) -> int:
    try:
        pred, _ = load_flow(pred_path)
        cloud = load_cloud(cloud_path, cfg["io.format"])
    except (OSError, ValueError) as exc:
        logger.error("%s", exc)
        return 1
    if cloud.gt_flow is None:
        logger.error("%s carries no ground-truth flow", cloud_path)
        return 1
    if len(pred) != len(cloud):
        logger.error("prediction has %d vectors but the cloud has %d points", len(pred), len(cloud))
        return 1
    homogeneous = cfg["metrics.homogeneous"]
    thr = cfg["metrics.dynamic_threshold"]
    rows = [("all", flow_metrics(pred, cloud.gt_flow, homogeneous=homogeneous))]
    report = None
    if cloud.is_foreground is not None:
        report = threeway(pred, cloud.gt_flow, cloud.is_foreground, thr,
                          weighted=cfg["metrics.weighted"], homogeneous=homogeneous)
        rows += list(report.buckets().items())
    print(f"{'bucket':<20}{'EPE':>9}{'AS':>9}{'AR':>9}{'Out.':>9}{'angle':>9}{'count':>8}")
    for name, m in rows:
        print(_metrics_row(name, m))
    if report is not None:
        print(f"{'threeway average':<20}{_fmt(report.average_epe)}")
    if cloud.class_id is not None:
        print()
        print(f"{'class':<20}{'avg':>9}{'dynamic':>9}{'static':>9}")
        for cls, (avg, dyn, stat) in per_class(pred, cloud.gt_flow, cloud.class_id, thr).items():
            print(f"{cls:<20d}{_fmt(avg)}{_fmt(dyn)}{_fmt(stat)}")
    if cfg["io.csv"]:
        with open(cfg["io.csv"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bucket", "epe", "as", "ar", "out", "angle", "count"])
            for name, m in rows:
                writer.writerow([name] + ["" if v is None else repr(v) for v in m.as_row()])
    return 0


def cmd_synth(scene: str, cfg: Dict[str, object]) -> int:
    if not cfg["io.out"]:
        logger.error("synth needs an output directory (--out)")
        return 2
    out_dir = Path(cfg["io.out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = synth.generate(synth.make_scene(scene, cfg["seed"]))
    manifest = []
    for frame in frames:
        name = f"frame_{frame.frame_index:04d}.lifc"
        save_cloud(out_dir / name, frame)
        manifest.append((name, "completed"))
    _write_manifest(out_dir, manifest)
    print(f"{scene}: wrote {len(frames)} frames to {out_dir}")
    return 0


def format_transform(t: RigidTransform, residual: float) -> str:
    lines = ["rotation:"]
    lines += ["  " + " ".join(f"{v: .12f}" for v in row) for row in t.rotation]
    lines.append("translation: " + " ".join(f"{v: .12f}" for v in t.translation))
    lines.append(f"angle_deg: {np.degrees(t.rotation_angle()):.9f}")
    lines.append(f"residual: {residual:.9g}")
    return "\n".join(lines)


def cmd_icp(src: str, dst: str, cfg: Dict[str, object]) -> int:
    try:
        source = load_cloud(src, cfg["io.format"])
        target = load_cloud(dst, cfg["io.format"])
        transform, residual = icp(source, target, run_config(cfg).icp)
    except (OSError, ValueError, RuntimeError) as exc:
        logger.error("%s", exc)
        return 1
    print(format_transform(transform, residual))
    return 0


def cmd_cluster(paths: List[str], cfg: Dict[str, object]) -> int:
    if not cfg["io.out"]:
        logger.error("cluster needs an output file (--out)")
        return 2
    config = run_config(cfg)
    frames, keeps, sizes, errors = _load_frames(paths, cfg)
    if errors:
        for msg in errors.values():
            logger.error("%s", msg)
        return 1
    last = len(frames) - 1
    first = max(0, last - config.cluster.horizon + 1)
    window = [frames[last]]
    to_last = RigidTransform.identity()
    try:
        for s in range(last - 1, first - 1, -1):
            to_last = to_last.compose(icp(frames[s], frames[s + 1], config.icp)[0])
            window.insert(0, apply_transform(frames[s], to_last))
    except Exception as exc:
        logger.error("ego-motion failed: %s", exc)
        return 1
    hard = spatiotemporal_hard_clusters(window, config.cluster)
    n = sizes[last]
    labels = _full_labels(hard.labels, hard.num_clusters, keeps[last], n)
    save_flow(cfg["io.out"], np.zeros((n, 3)), labels)
    print(f"{hard.num_clusters} clusters over {len(hard)} points")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        run_config(cfg)
    except ConfigError as exc:
        parser.error(str(exc))
    logging.basicConfig(level=logging.DEBUG if cfg["verbose"] else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "flow":
            return cmd_flow(args.frames, cfg)
        if args.command == "eval":
            return cmd_eval(args.pred, args.cloud, cfg)
        if args.command == "synth":
            return cmd_synth(args.scene, cfg)
        if args.command == "icp":
            return cmd_icp(args.src, args.dst, cfg)
        return cmd_cluster(args.frames, cfg)
    except ConfigError as exc:
        parser.error(str(exc))


if __name__ == "__main__":
    sys.exit(main())
