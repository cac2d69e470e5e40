"""Command-line surface tying simulation, calibration, and fusion together.

Exit codes: 0 success, 1 runtime error (message on stderr), 2 usage error.
A `<output>.config.json` echo of the resolved arguments is written next to
every output file.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import apc, dataio, lcrsf, simgen, solver
from .errors import UwbFuseError


def _write_echo(out_path, command: str, params: dict) -> None:
    echo = {"command": command, "params": params}
    dataio.atomic_write_text(str(out_path) + ".config.json", json.dumps(echo, indent=1, sort_keys=True))


def _cmd_simulate(args) -> int:
    with open(args.scenario, "r") as f:
        cfg = simgen.ScenarioConfig.from_dict(json.load(f))
    truth = simgen.generate(cfg)
    paths = simgen.write_run(truth, args.outdir)
    _write_echo(Path(args.outdir) / "run", "simulate", {"scenario": cfg.to_dict()})
    print(f"wrote run to {args.outdir} ({len(truth.ranges)} ranges, {len(truth.odom_s)} poses)")
    for k in sorted(paths):
        print(f"  {k}: {paths[k]}")
    return 0


def _apc_config(args) -> apc.ApcConfig:
    return apc.ApcConfig(
        tau=args.tau,
        cauchy_scale=args.cauchy_scale,
        anchor_init=args.init,
        include_height_priors=args.height_priors,
        solve_options=solver.SolveOptions(max_iters=100, verbose=args.verbose),
    )


def _cmd_calibrate(args) -> int:
    bundle = dataio.load_bundle(args.bundle)
    run = dataio.load_run(bundle)
    cfg = _apc_config(args)
    result = apc.calibrate(
        run.trajectory,
        run.ranges,
        run.extrinsics,
        pair_priors=run.pair_priors,
        height_priors=run.height_priors,
        cfg=cfg,
    )
    dataio.write_calibration(result, args.out)
    _write_echo(args.out, "calibrate", {"bundle": str(args.bundle), "config": result.config})
    s1, s2 = result.stage_reports[0], result.stage_reports[-1]
    n_in = sum(s.inlier_count for s in result.link_stats.values())
    n_raw = sum(s.raw_count for s in result.link_stats.values())
    print(f"calibrated {len(result.anchors)} anchors from {n_in}/{n_raw} inlier ranges")
    print(f"  stage 1: {s1.iterations} iters, cost {s1.initial_cost:.4g} -> {s1.final_cost:.4g}")
    print(f"  stage 2: {s2.iterations} iters, cost {s2.initial_cost:.4g} -> {s2.final_cost:.4g}")
    print(f"  wrote {args.out}")
    return 0


def _cmd_fuse(args) -> int:
    bundle = dataio.load_bundle(args.bundle)
    run = dataio.load_run(bundle)
    calib = dataio.parse_calibration(args.calib)
    cfg = lcrsf.FusionConfig(
        window=args.window,
        stride=args.stride,
        tau=args.tau,
        cauchy_scale=args.cauchy_scale,
        stationary_s=args.stationary,
        solve_options=solver.SolveOptions(max_iters=20, verbose=args.verbose),
    )
    out = lcrsf.run_fusion(run.trajectory, run.ranges, calib, run.extrinsics, cfg)
    dataio.write_trajectory(out.trajectory, args.out)
    _write_echo(
        args.out,
        "fuse",
        {
            "bundle": str(args.bundle),
            "calib": str(args.calib),
            "window": args.window,
            "stride": args.stride,
            "tau": args.tau,
            "cauchy_scale": args.cauchy_scale,
            "stationary_s": args.stationary,
        },
    )
    if args.timing:
        buf = io.StringIO()
        buf.write("index,t_end,n_poses,n_ranges,wall_ms,iterations,final_cost,termination\n")
        for w in out.timings:
            buf.write(
                f"{w.index},{w.t_end!r},{w.n_poses},{w.n_ranges},"
                f"{1e3 * w.wall_s!r},{w.iterations},{w.final_cost!r},{w.termination}\n"
            )
        dataio.atomic_write_text(args.timing, buf.getvalue())
    walls = np.array([w.wall_s for w in out.timings]) if out.timings else np.zeros(1)
    print(f"fused {len(out.trajectory)} poses over {len(out.timings)} windows")
    if out.init.ambiguous:
        print(f"  warning: initialization ambiguous ({out.init.note})")
    print(
        f"  window wall time: mean {1e3 * walls.mean():.1f} ms, "
        f"p95 {1e3 * np.percentile(walls, 95):.1f} ms, max {1e3 * walls.max():.1f} ms"
    )
    print(f"  dropped: {out.dropped}")
    print(f"  wrote {args.out}")
    return 0


def _cmd_eval_ate(args) -> int:
    est = dataio.parse_trajectory(args.est)
    gt = dataio.parse_trajectory(args.gt)
    report = dataio.ate(est, gt, mode=args.align)
    print(
        f"RMSE {report.rmse:.3f} m (mean {report.mean:.3f}, median {report.median:.3f}, "
        f"max {report.max:.3f}, pairs {report.n_pairs}, align {report.mode})"
    )
    return 0


def _cmd_filter_report(args) -> int:
    bundle = dataio.load_bundle(args.bundle)
    run = dataio.load_run(bundle)
    calib = dataio.parse_calibration(args.calib)
    outcome = apc.filter_outliers(
        run.ranges, calib.anchors, calib.biases, run.trajectory, args.tau, run.extrinsics
    )
    buf = io.StringIO()
    buf.write("t,tag_id,anchor_id,raw_range,predicted_range,kept\n")
    for i, m in enumerate(run.ranges):
        dev = outcome.deviation[i]
        corrected = m.d + calib.biases.get(m.tag_id, m.anchor_id)
        predicted = corrected - dev if np.isfinite(dev) else float("nan")
        buf.write(
            f"{m.t!r},{m.tag_id},{m.anchor_id},{m.d!r},{predicted!r},{int(outcome.kept_mask[i])}\n"
        )
    dataio.atomic_write_text(args.out, buf.getvalue())
    _write_echo(args.out, "filter-report", {"bundle": str(args.bundle), "tau": args.tau})
    kept = int(outcome.kept_mask.sum())
    print(f"kept {kept}/{len(run.ranges)} measurements at tau={args.tau}; wrote {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uwbfuse",
        description="UWB anchor calibration from a SLAM run, and range-SLAM fusion",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic run from a scenario config")
    p.add_argument("scenario", help="scenario config (JSON)")
    p.add_argument("outdir", help="output directory for the run bundle")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("calibrate", help="two-stage anchor calibration from a run bundle")
    p.add_argument("bundle", help="run bundle directory")
    p.add_argument("--tau", type=float, default=0.5, help="outlier gate threshold, m")
    p.add_argument("--cauchy-scale", type=float, default=1.0, help="robust loss scale, m")
    p.add_argument("--init", choices=("trilaterate", "centroid"), default="trilaterate")
    p.add_argument("--height-priors", action="store_true", help="use height priors if present")
    p.add_argument("--out", default="calib.json")
    p.add_argument("--verbose", action="store_true", help="print solver traces")
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("fuse", help="sliding-window range-SLAM fusion into the anchor frame")
    p.add_argument("bundle", help="run bundle directory")
    p.add_argument("--calib", required=True, help="calibration document (JSON)")
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--cauchy-scale", type=float, default=0.5)
    p.add_argument("--stationary", type=float, default=5.0, help="initialization window, s")
    p.add_argument("--out", default="traj_U.txt")
    p.add_argument("--timing", default=None, help="per-window timing CSV")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=_cmd_fuse)

    p = sub.add_parser("eval-ate", help="absolute trajectory error between two files")
    p.add_argument("est")
    p.add_argument("gt")
    p.add_argument("--align", choices=("none", "rigid"), default="none")
    p.set_defaults(fn=_cmd_eval_ate)

    p = sub.add_parser("filter-report", help="raw-vs-filtered range series per link")
    p.add_argument("bundle")
    p.add_argument("--calib", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", default="filter_report.csv")
    p.set_defaults(fn=_cmd_filter_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.fn(args)
    except (UwbFuseError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
