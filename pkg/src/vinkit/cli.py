"""``vinkit`` command line: simulate, run, evaluate, selftest.

Exit codes: 0 success, 1 failed selftest or violated contract, 2 usage or
configuration error, 3 I/O or data-format error, 4 estimator divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import io, pipeline
from .config import Config, RunConfig, load_config, parse_config
from .errors import (
    AlignmentFailed,
    ConfigError,
    ContractViolation,
    DataFormatError,
    EstimatorDiverged,
    InitializationDeferred,
)
from .sim import generate

log = logging.getLogger("vinkit")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4
HEADLINE = {"ate": ("ate_rmse_m",), "rpe": ("rpe_trans_rmse", "rpe_rot_rmse_rad"), "nees": ("avg_nees", "avg_nees_pose")}


def _setup_logging() -> None:
    level = os.environ.get("VINKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _run_config(args, data_dir: Path) -> RunConfig:
    """Run settings from ``--config``, else the config stored with the dataset."""
    if args.config:
        cfg = load_config(args.config)
    elif (data_dir / "config.json").is_file():
        cfg = parse_config(io.read_json(data_dir / "config.json"))
    else:
        cfg = parse_config({})
    run = cfg.run
    if args.estimator:
        run.estimator = args.estimator
    if args.seed is not None:
        run.seed = args.seed
    return run.validate()


def cmd_simulate(args) -> int:
    cfg: Config = load_config(args.config)
    if cfg.scenario is None:
        raise ConfigError("scenario", "simulate needs a scenario section")
    raw = dict(cfg.raw)
    if args.seed is not None:
        cfg.scenario.seed = args.seed
        raw["seed"] = args.seed
    data = generate(cfg.scenario)
    pipeline.write_dataset(data, Path(args.out), raw)
    n_obs = sum(len(f) for f in data.features)
    print(f"wrote {args.out}: {len(data.timestamps_ns)} IMU samples, {len(data.features)} frames, {n_obs} features")
    return EXIT_OK


def cmd_run(args) -> int:
    data_dir = Path(args.data)
    run = _run_config(args, data_dir)
    ds = pipeline.load_dataset(data_dir)
    res = pipeline.run_estimator(ds, run)
    pipeline.write_run(res, Path(args.out), run)
    print(f"wrote {args.out}: {run.estimator} estimate for {len(res.states)} frames")
    return EXIT_OK


def _read_groundtruth(path: Path):
    path = Path(path)
    if path.is_dir():
        path = path / "groundtruth.csv"
    ts, states, _ = io.read_trajectory_csv(path)
    return ts, states


def cmd_evaluate(args) -> int:
    est_path = Path(args.estimate)
    if est_path.is_dir():
        est_path = est_path / "trajectory.csv"
    cfg = load_config(args.config).evaluate if args.config else parse_config({}).evaluate
    est_ns, est, _ = io.read_trajectory_csv(est_path)
    gt_ns, gt = _read_groundtruth(args.groundtruth)
    covs = None
    cov_path = est_path.parent / "covariance.csv"
    if args.metric in ("nees", "all") and cov_path.is_file():
        cov_ns, covs = io.read_covariance_csv(cov_path)
        if list(cov_ns) != list(est_ns):
            raise DataFormatError(f"{cov_path}: timestamps do not match {est_path}")
    metrics, rows = pipeline.evaluate(est_ns, est, gt_ns, gt, cfg, covs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics["metric"] = args.metric
    io.write_json(out / "metrics.json", metrics)
    io.write_csv(out / "errors.csv", ["timestamp_ns", "position_error_m", "rotation_error_rad", "nees"], rows)
    seg = metrics["rpe_segments"]
    io.write_csv(
        out / "rpe.csv",
        ["start_time_s", "trans_error_m", "rot_error_rad"],
        ([repr(float(a)), repr(float(b)), repr(float(c))] for a, b, c in zip(seg["start_time_s"], seg["trans_m"], seg["rot_rad"])),
    )
    keys = [k for name in (HEADLINE if args.metric == "all" else [args.metric]) for k in HEADLINE[name]]
    for k in keys:
        print(f"{k}: {metrics[k]}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vinkit", description="Visual-inertial estimation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", required=True, help="config JSON with a scenario section")
    s.add_argument("--out", required=True, help="dataset directory to create")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run an estimator on a dataset")
    r.add_argument("--data", required=True, help="dataset directory")
    r.add_argument("--out", required=True, help="result directory")
    r.add_argument("--estimator", choices=("filter", "smoother"))
    r.add_argument("--config", help="config JSON (default: the dataset's config.json)")
    r.add_argument("--seed", type=int, help="seed for the optional initial-state perturbation")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="compute ATE / RPE / NEES")
    e.add_argument("--estimate", required=True, help="trajectory.csv or a result directory")
    e.add_argument("--groundtruth", required=True, help="groundtruth.csv or a dataset directory")
    e.add_argument("--out", required=True, help="directory for metrics.json and error CSVs")
    e.add_argument("--metric", choices=("ate", "rpe", "nees", "all"), default="all", help="metric(s) to print")
    e.add_argument("--config", help="config JSON with an evaluate section")
    e.set_defaults(func=cmd_evaluate)

    t = sub.add_parser("selftest", help="run the built-in invariant checks")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"vinkit: config error at '{exc.key}': {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataFormatError) as exc:
        print(f"vinkit: {exc}", file=sys.stderr)
        return EXIT_IO
    except EstimatorDiverged as exc:
        print(f"vinkit: estimator diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractViolation, AlignmentFailed, InitializationDeferred) as exc:
        print(f"vinkit: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
