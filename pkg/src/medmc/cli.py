"""Command line entry point.

Subcommands: simulate (draw a scenario to files), fit (one estimator on an
observation file), refine (iterated refinement from an initial matrix),
bench (multi-method replication study), ingest (ratings pipeline).

Every run writes a manifest.json capturing the resolved configuration and
seeds; rerunning with the same manifest inputs reproduces the text outputs
byte for byte (timing lives only in manifests and JSON detail).  Exit codes:
0 success, 1 argument/validation error, 2 numerical failure.
"""

import argparse
import json
import os
import sys
import time
import numpy as np
from dataclasses import replace

from . import __version__
from .core import NumericalError, metrics
from .io import read_matrix, read_observations, write_matrix, write_observations
from .prox import QuadSolverConfig, fit_quadratic_nuclear
from .lad_admm import AdmmConfig, fit_lad_nuclear
from .partition import Partition, fit_bladmc
from .refine import RefinementConfig, dladmc
from .bench import (BenchConfigs, STREAM_MATRIX, STREAM_TRAIN, STREAM_VALIDATION,
                    gen_lowrank, load_scenario_file, run_experiment,
                    sample_observations, scenario_from_settings)
from .ingest import (biscale, filter_min_counts, inject_outliers, load_provider_split,
                     parse_movielens, split_folds)


def _threads(args):
    if getattr(args, "threads", None) is not None:
        return args.threads
    return int(os.environ.get("MEDMC_THREADS", "1"))


def _write_manifest(path, args, outputs, seeds, started):
    config = {k: v for k, v in vars(args).items() if k != "func" and v is not None}
    manifest = {
        "command": ["medmc", args.subcommand] + sys.argv[2:] if sys.argv[1:2] == [args.subcommand] else ["medmc", args.subcommand],
        "subcommand": args.subcommand,
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "wall_time_s": time.perf_counter() - started,
        "outputs": [str(p) for p in outputs],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _cmd_simulate(args, started):
    settings = load_scenario_file(args.scenario)
    scenario, _ = scenario_from_settings(settings, seed_override=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    ss = np.random.SeedSequence(scenario.noise.seed)
    streams = ss.spawn(3)
    A_star = gen_lowrank(scenario.n_rows, scenario.n_cols, scenario.rank,
                         np.random.default_rng(streams[STREAM_MATRIX]))
    train, _ = sample_observations(A_star, scenario, np.random.default_rng(streams[STREAM_TRAIN]))
    val, _ = sample_observations(A_star, scenario, np.random.default_rng(streams[STREAM_VALIDATION]))
    paths = [os.path.join(args.out_dir, name) for name in
             ("truth.txt", "train.txt", "validation.txt")]
    write_matrix(paths[0], A_star + scenario.median_offset)
    write_observations(paths[1], train)
    write_observations(paths[2], val)
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), args, paths,
                    {"base": scenario.noise.seed}, started)
    print(f"wrote {', '.join(paths)}")
    return 0


def _cmd_fit(args, started):
    obs = read_observations(args.obs)
    box = args.box if args.box is not None else np.inf
    if args.method == "mht":
        if args.lam is None:
            raise ValueError("--lambda is required for method mht")
        cfg = QuadSolverConfig(lam=args.lam, box_bound=box, max_iters=args.max_iters,
                               rel_tol=args.rel_tol, step_rule="backtracking")
        est = fit_quadratic_nuclear(obs, None, cfg)
    elif args.method == "ladmc":
        if args.lam is None:
            raise ValueError("--lambda is required for method ladmc")
        cfg = AdmmConfig(lam=args.lam, rho=args.rho, max_iters=args.max_iters,
                         box_bound=box)
        est = fit_lad_nuclear(obs, None, cfg)
    elif args.method == "bladmc":
        part = Partition(obs.n_rows, obs.n_cols,
                         args.m1 or max(1, obs.n_rows // 2),
                         args.m2 or max(1, obs.n_cols // 2))
        cfg = AdmmConfig(rho=args.rho, max_iters=args.max_iters, box_bound=box)
        est = fit_bladmc(obs, None, part, lam=args.lam, admm_config=cfg,
                         n_workers=_threads(args))
    else:
        raise ValueError(f"unknown method {args.method!r}")
    write_matrix(args.out, est.values)
    _write_manifest(args.out + ".manifest.json", args, [args.out], {}, started)
    print(f"wrote {args.out} (iterations {est.iterations_used}, "
          f"converged {est.converged})")
    return 0


def _cmd_refine(args, started):
    obs = read_observations(args.obs)
    initial = read_matrix(args.initial)
    validation = read_observations(args.validation) if args.validation else None
    truth = read_matrix(args.truth) if args.truth else None
    cfg = RefinementConfig(
        t_max=args.T,
        lambda_rule="validation" if validation is not None else "schedule",
        lambda_constant=args.lambda_constant,
        r_star=args.r_star if args.r_star else "estimated",
        m1=args.m1, m2=args.m2)
    qcfg = QuadSolverConfig(max_iters=args.max_iters, rel_tol=args.rel_tol,
                            step_rule="backtracking")
    est, trace = dladmc(obs, None, initial=initial, cfg=cfg, quad_config=qcfg,
                        validation=validation, ground_truth=truth)
    write_matrix(args.out, est.values)
    outputs = [args.out]
    if args.trace:
        trace.to_csv(args.trace)
        outputs.append(args.trace)
    _write_manifest(args.out + ".manifest.json", args, outputs, {}, started)
    last = trace.rows[-1]
    msg = f"wrote {args.out} after {len(trace)} passes (final rel change {last.rel_change:.3e})"
    if truth is not None:
        msg += f", rmse {last.rmse:.4f}"
    print(msg)
    return 0


def _cmd_bench(args, started):
    settings = load_scenario_file(args.scenario)
    scenario, extras = scenario_from_settings(settings, seed_override=args.seed)
    methods = tuple((args.methods or extras.get("methods", "bladmc,dladmc,acl,mht"))
                    .replace(" ", "").split(","))
    reps = args.reps if args.reps is not None else extras.get("reps", 10)
    m1 = args.m1 or extras.get("m1", max(1, scenario.n_rows // 2))
    m2 = args.m2 or extras.get("m2", max(1, scenario.n_cols // 2))
    part = Partition(scenario.n_rows, scenario.n_cols, m1, m2)
    cfgs = BenchConfigs()
    if args.t_max or extras.get("t_max"):
        cfgs = replace(cfgs, refine=replace(cfgs.refine,
                                            t_max=args.t_max or extras["t_max"]))
    if extras.get("grid_size"):
        cfgs = replace(cfgs, grid_size=extras["grid_size"])
    if extras.get("grid_min_frac"):
        cfgs = replace(cfgs, grid_min_frac=extras["grid_min_frac"])
    report = run_experiment(scenario, methods, reps, part=part, configs=cfgs,
                            n_workers=_threads(args))
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "report.csv")
    json_path = os.path.join(args.out_dir, "report.json")
    report.to_csv(csv_path)
    report.to_json(json_path)
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), args,
                    [csv_path, json_path], {"base": scenario.noise.seed}, started)
    for s in report.summaries:
        std = f" ({s.rmse_std:.4f})" if s.rmse_std is not None else ""
        print(f"{s.method:8s} rmse {s.rmse_mean:.4f}{std}  mae {s.mae_mean:.4f}  "
              f"rank {s.rank_mean:.1f}  [{s.replications} ok, {s.failures} failed]")
    return 0


def _cmd_ingest(args, started):
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    if args.train and args.test:
        combined, train, test = load_provider_split(args.train, args.test,
                                                    min_count=args.min_count,
                                                    single_pass=args.single_pass)
        if args.outlier_frac:
            combined = inject_outliers(combined, args.outlier_frac, args.seed)
            train = combined.select(combined.tags == 0)
            test = combined.select(combined.tags == 1)
        splits = [("train", train.to_observations()), ("test", test.to_observations())]
        shape = (combined.n_users, combined.n_items)
    elif args.data:
        table = parse_movielens(args.data)
        if args.min_count > 0:
            table = filter_min_counts(table, args.min_count, single_pass=args.single_pass)
        if args.outlier_frac:
            table = inject_outliers(table, args.outlier_frac, args.seed)
        shape = (table.n_users, table.n_items)
        if args.folds:
            pairs = split_folds(table, args.folds, args.seed)
            splits = []
            for f, (tr, te) in enumerate(pairs):
                splits.append((f"fold{f}_train", tr))
                splits.append((f"fold{f}_test", te))
        else:
            splits = [("all", table.to_observations())]
    else:
        raise ValueError("ingest needs --data or both --train and --test")

    scale_params = None
    for name, obs in splits:
        path = os.path.join(args.out_dir, f"{name}.txt")
        if args.biscale and name.endswith(("train", "all")):
            scaled, params = biscale(obs)
            scale_params = params
            write_observations(path, obs, responses=scaled)
            scale_path = os.path.join(args.out_dir, f"{name}_biscale.json")
            with open(scale_path, "w") as fh:
                json.dump({k: getattr(params, k).tolist() for k in
                           ("row_center", "row_scale", "col_center", "col_scale")}
                          | {"iterations": params.iterations, "converged": params.converged},
                          fh, indent=2, sort_keys=True)
                fh.write("\n")
            outputs.append(scale_path)
        else:
            write_observations(path, obs)
        outputs.append(path)
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), args, outputs,
                    {"seed": args.seed}, started)
    print(f"wrote {len(outputs)} files to {args.out_dir} (matrix {shape[0]}x{shape[1]})")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="medmc",
                                description="Median matrix completion toolkit")
    sub = p.add_subparsers(dest="subcommand", required=True)

    ps = sub.add_parser("simulate", help="draw one scenario replication to files")
    ps.add_argument("--scenario", required=True, help="scenario config file")
    ps.add_argument("--out-dir", required=True)
    ps.add_argument("--seed", type=int, default=None, help="override the config seed")
    ps.set_defaults(func=_cmd_simulate)

    pf = sub.add_parser("fit", help="fit one estimator on an observation file")
    pf.add_argument("--method", required=True, choices=("mht", "ladmc", "bladmc"))
    pf.add_argument("--obs", required=True)
    pf.add_argument("--out", required=True)
    pf.add_argument("--lambda", dest="lam", type=float, default=None)
    pf.add_argument("--m1", type=int, default=None, help="block rows (bladmc)")
    pf.add_argument("--m2", type=int, default=None, help="block cols (bladmc)")
    pf.add_argument("--rho", type=float, default=1.0)
    pf.add_argument("--box", type=float, default=None, help="entrywise bound")
    pf.add_argument("--max-iters", type=int, default=2000)
    pf.add_argument("--rel-tol", type=float, default=1e-8)
    pf.add_argument("--threads", type=int, default=None)
    pf.set_defaults(func=_cmd_fit)

    pr = sub.add_parser("refine", help="iterated refinement from an initial matrix")
    pr.add_argument("--initial", required=True, help="matrix file with the starting estimate")
    pr.add_argument("--obs", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--T", type=int, default=5, help="maximum refinement passes")
    pr.add_argument("--trace", default=None, help="write per-pass diagnostics CSV here")
    pr.add_argument("--validation", default=None, help="observation file for penalty tuning")
    pr.add_argument("--truth", default=None, help="matrix file; adds error columns to the trace")
    pr.add_argument("--lambda-constant", type=float, default=1.0)
    pr.add_argument("--r-star", type=int, default=None)
    pr.add_argument("--m1", type=int, default=None)
    pr.add_argument("--m2", type=int, default=None)
    pr.add_argument("--max-iters", type=int, default=500)
    pr.add_argument("--rel-tol", type=float, default=1e-6)
    pr.set_defaults(func=_cmd_refine)

    pb = sub.add_parser("bench", help="replication study over one scenario")
    pb.add_argument("--scenario", required=True)
    pb.add_argument("--methods", default=None, help="comma list: bladmc,dladmc,acl,mht")
    pb.add_argument("--reps", type=int, default=None)
    pb.add_argument("--seed", type=int, default=None)
    pb.add_argument("--out-dir", required=True)
    pb.add_argument("--m1", type=int, default=None)
    pb.add_argument("--m2", type=int, default=None)
    pb.add_argument("--t-max", type=int, default=None)
    pb.add_argument("--threads", type=int, default=None)
    pb.set_defaults(func=_cmd_bench)

    pi = sub.add_parser("ingest", help="ratings pipeline to observation files")
    pi.add_argument("--data", default=None, help="single ratings file")
    pi.add_argument("--train", default=None, help="provider train split")
    pi.add_argument("--test", default=None, help="provider test split")
    pi.add_argument("--out-dir", required=True)
    pi.add_argument("--min-count", type=int, default=0)
    pi.add_argument("--single-pass", action="store_true",
                    help="one filtering round instead of the fixed point")
    pi.add_argument("--outlier-frac", type=float, default=0.0)
    pi.add_argument("--biscale", action="store_true")
    pi.add_argument("--folds", type=int, default=None)
    pi.add_argument("--seed", type=int, default=0)
    pi.set_defaults(func=_cmd_ingest)
    return p


def dispatch(argv):
    """Parse and run; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    started = time.perf_counter()
    try:
        return args.func(args, started)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
