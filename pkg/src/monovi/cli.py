"""Command-line entry point: simulate, init, benchmark, eval."""
from __future__ import annotations

import argparse
import csv
import functools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import DatasetError, InitializationFailed, InvalidScenario, MonoviError, WindowOutOfRange
from .evaluation import Trajectory, aggregate, evaluate_window, mean_acceleration
from .io import ensure_parent, load_config, read_dataset, read_trajectory, window_starts, write_dataset, write_trajectory
from .pipeline import SCHEMA_VERSION, PipelineConfig, run_initialization
from .sim import KINDS, generate_sequence, preset

EXIT_OK, EXIT_FAILED, EXIT_IO = 0, 1, 2
DEFAULT_STRIDE = {5: 0.8, 10: 1.6}
BENCHMARK_COLUMNS = [
    "window",
    "start_ts",
    "success",
    "failure_stage",
    "scale",
    "scale_error_pct",
    "position_rmse",
    "gravity_error_deg",
    "mean_acceleration",
    "low_motion",
    "depth_total",
    "depth_inliers",
    "stage1_iterations",
    "stage2_iterations",
    "reprojection_rms",
]


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _config(args, keyframes=None):
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    over = {}
    if getattr(args, "use_depth", None) is not None:
        over["use_depth"] = args.use_depth
    if keyframes is not None:
        over["keyframes"] = keyframes
    return replace(cfg, **over)


def _emit_json(payload, out):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        ensure_parent(out)
        Path(out).write_text(text + "\n")
    else:
        print(text)


# --- simulate ----------------------------------------------------------------


def cmd_simulate(args):
    try:
        sc = preset(args.kind, args.seed, **({"duration": args.duration} if args.duration else {}))
        if args.images:
            sc = replace(sc, with_images=True)
        if args.outliers:
            sc = replace(sc, outlier_fraction=args.outliers)
    except InvalidScenario as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    seq = generate_sequence(sc)
    write_dataset(seq.dataset, args.out)
    print(f"wrote {seq.dataset.num_frames} frames to {args.out}", file=sys.stderr)
    return EXIT_OK


# --- init ----------------------------------------------------------------------


def cmd_init(args):
    cfg = _config(args, args.keyframes)
    dataset = read_dataset(args.dataset)
    window = dataset.window_at(args.start, cfg.keyframes, use_depth=cfg.use_depth)
    code = EXIT_OK
    try:
        report = run_initialization(window, cfg)
    except InitializationFailed as exc:
        report = exc.report
        code = EXIT_FAILED
        if report is None:
            _emit_json({"schema_version": SCHEMA_VERSION, "success": False, "failure_stage": exc.stage,
                        "message": str(exc)}, args.out)
            return code
    if not report.success:
        code = EXIT_FAILED
    _emit_json(report.to_dict(), args.out)
    if args.trajectory and report.estimate is not None:
        ensure_parent(args.trajectory)
        write_trajectory(args.trajectory, Trajectory.from_states(report.estimate.states))
    return code


# --- benchmark -------------------------------------------------------------------


@functools.lru_cache(maxsize=2)
def _cached_dataset(root):
    return read_dataset(root)


def _window_acceleration(gt: Trajectory, t0, t1):
    sel = (gt.timestamps >= t0) & (gt.timestamps <= t1)
    t = (gt.timestamps[sel] - gt.timestamps[sel][0]) * 1e-9
    if len(t) < 3:
        return float("nan")
    acc = np.gradient(gt.v[sel], t, axis=0)
    return mean_acceleration(t, accelerations=acc)


def benchmark_window(root, index, start_index, cfg_dict):
    """One benchmark row; never raises for per-window failures."""
    cfg = PipelineConfig.from_dict(cfg_dict)
    ds = _cached_dataset(str(root))
    row = dict.fromkeys(BENCHMARK_COLUMNS, "")
    row.update(window=index, success=0)
    start_ts = int(ds.frame_timestamps[start_index]) if start_index < ds.num_frames else ""
    row["start_ts"] = start_ts
    try:
        window = ds.window(start_index, cfg.keyframes, use_depth=cfg.use_depth)
    except WindowOutOfRange:
        row["failure_stage"] = "window"
        return row
    try:
        report = run_initialization(window, cfg)
    except InitializationFailed as exc:
        row["failure_stage"] = exc.stage
        return row
    row["depth_total"] = report.depth_total
    row["depth_inliers"] = report.depth_inliers
    row["stage1_iterations"] = report.stage1.iterations if report.stage1 else ""
    row["stage2_iterations"] = report.stage2.iterations if report.stage2 else ""
    row["reprojection_rms"] = _fmt(report.reprojection_rms)
    if not report.success:
        row["failure_stage"] = report.failure_stage
        return row
    row["success"] = 1
    if ds.groundtruth is not None:
        gt_states = ds.groundtruth.states_at(window.timestamps)
        acc = _window_acceleration(ds.groundtruth, window.timestamps[0], window.timestamps[-1])
        m = evaluate_window(report.estimate.states, gt_states, acc)
        row.update(
            scale=_fmt(m.scale),
            scale_error_pct=_fmt(m.scale_error_pct),
            position_rmse=_fmt(m.position_rmse),
            gravity_error_deg=_fmt(m.gravity_error_deg),
            mean_acceleration=_fmt(m.mean_acceleration),
            low_motion=int(m.low_motion),
        )
    return row


def _fmt(x):
    if x is None:
        return ""
    x = float(x)
    return repr(x) if math.isfinite(x) else str(x)


def _row_metrics(rows):
    from .evaluation import WindowMetrics

    out = []
    for r in rows:
        if r["success"] and r["scale"] != "":
            out.append(
                WindowMetrics(
                    float(r["scale"]),
                    float(r["scale_error_pct"]),
                    float(r["position_rmse"]),
                    float(r["gravity_error_deg"]),
                    float(r["mean_acceleration"]),
                )
            )
    return out


def cmd_benchmark(args):
    cfg = _config(args, args.keyframes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset:
        root = Path(args.dataset)
    else:
        root = out / "dataset"
        sc = preset(args.kind, args.seed, duration=args.duration)
        write_dataset(generate_sequence(sc).dataset, root)
    ds = _cached_dataset(str(root))
    stride = args.stride if args.stride else DEFAULT_STRIDE.get(cfg.keyframes, cfg.keyframes / ds.calibration.camera_rate)
    starts = window_starts(ds, stride)
    jobs = [(str(root), i, s, cfg.to_dict()) for i, s in enumerate(starts)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(benchmark_window, *zip(*jobs)))
    else:
        rows = [benchmark_window(*j) for j in jobs]

    with open(out / "windows.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCHMARK_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "attempts": len(rows),
        "successes": sum(int(r["success"]) for r in rows),
        "stride_s": stride,
        "keyframes": cfg.keyframes,
        "use_depth": cfg.use_depth,
        "seed": args.seed,
        "metrics": aggregate(_row_metrics(rows)),
    }
    _emit_json(summary, out / "aggregate.json")
    print(f"{summary['successes']}/{summary['attempts']} windows initialized", file=sys.stderr)
    return EXIT_OK


# --- eval ----------------------------------------------------------------------------


def cmd_eval(args):
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    common = np.intersect1d(est.timestamps, gt.timestamps)
    if len(common) < 3:
        print("error: fewer than three common timestamps", file=sys.stderr)
        return EXIT_IO
    e = est.states_at(common)
    g = gt.states_at(common)
    m = evaluate_window(e, g)
    _emit_json(
        {
            "schema_version": SCHEMA_VERSION,
            "poses": int(len(common)),
            "scale": m.scale,
            "scale_error_pct": m.scale_error_pct,
            "position_rmse": m.position_rmse,
            "gravity_error_deg": m.gravity_error_deg,
        },
        args.out,
    )
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="monovi", description="Depth-aided visual-inertial initialization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--kind", choices=list(KINDS) + ["noisy-hover"], default="excited")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--outliers", type=float, default=0.0, help="fraction of features with decoy depth")
    p.add_argument("--images", action="store_true", help="also render grayscale images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("init", help="initialize one window and print the report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--keyframes", type=int, default=None)
    p.add_argument("--use-depth", type=_on_off, default=None, metavar="{on,off}")
    p.add_argument("--start", type=int, default=None, help="first keyframe timestamp (ns)")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="report path (default: stdout)")
    p.add_argument("--trajectory", default=None, help="write estimated keyframe states as CSV")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("benchmark", help="sweep evenly spaced windows")
    p.add_argument("--dataset", default=None, help="existing dataset; simulated from --seed otherwise")
    p.add_argument("--kind", choices=list(KINDS) + ["noisy-hover"], default="excited")
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--keyframes", type=int, choices=[5, 10], default=5)
    p.add_argument("--use-depth", type=_on_off, default=None, metavar="{on,off}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stride", type=float, default=None, help="seconds between window starts")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("eval", help="compare trajectory files")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MonoviError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
