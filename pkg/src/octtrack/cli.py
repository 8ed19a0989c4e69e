"""Command-line entry point: ``python -m octtrack <command> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import calibration, harness
from .actuation import DeviceParams, describe_device
from .control import read_log_csv, write_log_csv
from .phantom import MOTION_KINDS, make_scene


def _load_json(path):
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _emit(obj, out=None, name=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        path = os.path.join(out, name) if name and os.path.isdir(out) else out
        with open(path, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def _finish(checks: dict, check: bool) -> int:
    bad = [k for k, ok in checks.items() if not ok]
    for k in bad:
        print(f"check failed: {k}", file=sys.stderr)
    return 1 if check and bad else 0


def cmd_simulate(args) -> int:
    conf = _load_json(args.config)
    for key in ("motion", "velocity", "sample", "duration"):
        val = getattr(args, key)
        if val is not None:
            conf[key] = val
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    motion = conf.get("motion", "lateral-diagonal")
    velocity = float(conf.get("velocity", 10.0))
    cfg = harness.ExperimentConfig(motion=motion, velocities=(velocity,), sample=conf.get("sample", "plate"),
                                   repeats=1, duration=float(conf.get("duration", 60.0)), seed=seed,
                                   time_compression=float(conf.get("time_compression", 1.0)),
                                   device=conf.get("device", {}), controller=conf.get("controller", {}),
                                   fast_path=not args.fringes, latency_sweep=args.sweep)
    spec = harness.run_specs(cfg)[0]
    log = harness.simulate_run(cfg, spec)
    if args.out:
        write_log_csv(args.out, log)
    rec = harness.evaluate_log(log, cfg)
    rec["stats"] = {k: log.stats[k] for k in harness._STAT_KEYS}
    _emit(rec)
    return _finish({"no_failure": not rec["failed"]}, args.check)


def cmd_experiment(args) -> int:
    conf = _load_json(args.config)
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.workers is not None:
        conf["workers"] = args.workers
    if args.time_compression is not None:
        conf["time_compression"] = args.time_compression
    cfg = harness.ExperimentConfig.from_dict(conf)
    out = args.out or "experiment_out"
    os.makedirs(out, exist_ok=True)
    report = harness.run_experiment(cfg, out)
    for a in report.aggregates:
        print(json.dumps(a, sort_keys=True))
    print(f"report written to {os.path.join(out, 'report.json')}")
    return _finish(report.checks(), args.check)


def cmd_calibrate(args) -> int:
    conf = _load_json(args.config)
    grid = calibration.GridSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in conf.get("grid", {}).items()})
    device = DeviceParams.from_dict(conf.get("device"))
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    scene = make_scene(conf.get("sample", "plate"), int(np.random.SeedSequence(seed).generate_state(1)[0]))
    samples, _ = calibration.collect_grid(scene, grid, device, seed=seed)
    model = calibration.calibrate(samples)
    out = args.out or "calibration_out"
    os.makedirs(out, exist_ok=True)
    calibration.save_model(os.path.join(out, "model.json"), model)
    calibration.write_samples_csv(os.path.join(out, "samples.csv"), samples)
    st = model.stats
    _emit(st)
    checks = {"residual_le_0.15mm": st["residual_rmse_mm"] <= 0.15,
              "quadratic_2x_better": st["affine_rmse_mm"] >= 2 * st["residual_rmse_mm"]}
    return _finish(checks, args.check)


def cmd_latency(args) -> int:
    log = read_log_csv(args.log)
    curve = harness.latency_sweep(log, args.lo, args.hi, args.step)
    d = curve.to_dict()
    if not args.full:
        d = {k: d[k] for k in ("best_delay_s", "best_rmse_mm")}
        d["rmse_at_zero_mm"] = harness.compute_rmse(log, 0.0)
    _emit(d, args.out, "latency.json")
    return 0


def cmd_bench(args) -> int:
    dims = tuple(int(v) for v in args.dims.split("x"))
    res = harness.benchmark_throughput(dims, args.seconds, recon=args.recon, seed=args.seed or 0,
                                       workers=args.workers)
    print(f"measured {res['mean_vol_per_s']:.1f} vol/s (p5 {res['p5_vol_per_s']:.1f}) "
          f"vs target {res['target_vol_per_s']} vol/s", file=sys.stderr)
    _emit(res, args.out, "bench.json")
    return _finish({"rate_ge_100": res["mean_vol_per_s"] >= 100.0}, args.check)


def cmd_describe(args) -> int:
    dev = DeviceParams.from_dict(_load_json(args.config).get("device"))
    _emit(describe_device(dev), args.out, "device.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octtrack", description="Simulated volumetric OCT motion tracking")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output path"):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--check", action="store_true", help="exit nonzero when a check fails")
        sp.add_argument("--out", help=out_help)

    s = sub.add_parser("simulate", help="one closed-loop run -> CSV log")
    common(s, "CSV log path")
    s.add_argument("--motion", choices=MOTION_KINDS)
    s.add_argument("--velocity", type=float)
    s.add_argument("--sample", choices=("plate", "tissue"))
    s.add_argument("--duration", type=float)
    s.add_argument("--fringes", action="store_true", help="render through raw fringes and reconstruction")
    s.add_argument("--sweep", action="store_true", help="also run a latency sweep")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("experiment", help="velocity sweep -> report JSON + per-run CSVs")
    common(s, "output directory")
    s.add_argument("--workers", type=int)
    s.add_argument("--time-compression", type=float)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("calibrate", help="collect the calibration grid and fit the model")
    common(s, "output directory")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("latency", help="RMSE vs delay on a logged run")
    common(s, "JSON output path")
    s.add_argument("log", help="CSV log written by simulate/experiment")
    s.add_argument("--lo", type=float, default=-0.05)
    s.add_argument("--hi", type=float, default=0.05)
    s.add_argument("--step", type=float, default=0.001)
    s.add_argument("--full", action="store_true", help="include the whole curve")
    s.set_defaults(func=cmd_latency)

    s = sub.add_parser("bench", help="phase-correlation throughput")
    common(s, "JSON output path")
    s.add_argument("--seconds", type=float, default=5.0)
    s.add_argument("--dims", default="32x32x480")
    s.add_argument("--recon", action="store_true")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("describe-device", help="print the effective device parameters")
    common(s, "JSON output path")
    s.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
