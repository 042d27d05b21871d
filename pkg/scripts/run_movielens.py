#!/usr/bin/env python3
"""Ratings benchmark on a provider train/test split (MovieLens 100K layout).

Pipeline: parse both files, jointly drop users/items with fewer than
--min-count ratings (k = 20 leaves a 739x918 matrix on MovieLens 100K),
optionally flip a fraction of the 5-ratings to 1 to make the outlier
variants, bi-scale the training entries, fit each method in the scaled
space, then score the unscaled estimate on the held-out provider split.

Penalties are tuned by k-fold cross-validation on the training entries
(mean held-out absolute loss over folds, smallest penalty wins ties);
the refinement pass reuses the first fold as its per-pass validation set.

    python3 scripts/run_movielens.py --train ml-100k/u1.base --test ml-100k/u1.test
    python3 scripts/run_movielens.py --train ml-100k/u1.base --test ml-100k/u1.test \
        --outlier-frac 0.2 --methods bladmc,dladmc,mht
"""

import argparse
import json
import os
import sys
import time
import warnings
from dataclasses import replace

import numpy as np

from medmc.bench import BenchConfigs, lad_lambda_max, tune_lambda
from medmc.core import metrics
from medmc.ingest import biscale, inject_outliers, load_provider_split, split_folds
from medmc.lad_admm import fit_lad_nuclear
from medmc.partition import Partition, fit_bladmc, scatter, theorem_lambda
from medmc.prox import fit_quadratic_nuclear
from medmc.refine import RefinementConfig, dladmc, lambda_grid, quad_lambda_max


def cv_lambda(grid, pairs):
    """Mean held-out absolute loss over folds; smallest penalty wins ties."""
    grid = np.atleast_1d(grid)
    losses = np.full((len(pairs), grid.size), np.nan)
    for f, (fit, val) in enumerate(pairs):
        losses[f] = tune_lambda(fit, grid, val).losses
    mean = np.nanmean(losses, axis=0)
    return float(grid[int(np.nanargmin(mean))])


def scaled_folds(table, params, n_folds, seed):
    """Fold the training entries, with responses mapped to the scaled space."""
    pairs = []
    for tr, va in split_folds(table, n_folds, seed):
        pairs.append(((tr, params.transform(tr)), (va, params.transform(va))))
    return pairs


def fit_mht(train, z, folds, cfgs):
    def make_fit(obs, y):
        def fit(lam, warm):
            est = fit_quadratic_nuclear(obs, y, replace(cfgs.quad, lam=lam),
                                        initial=warm)
            return est, est.values
        return fit

    grid = lambda_grid(quad_lambda_max(train, z), cfgs.grid_size, cfgs.grid_min_frac)
    lam = cv_lambda(grid, [(make_fit(tr, y), val) for (tr, y), val in folds])
    t0 = time.perf_counter()
    est = fit_quadratic_nuclear(train, z, replace(cfgs.quad, lam=lam))
    return est, lam, time.perf_counter() - t0


def fit_acl(train, z, folds, cfgs):
    def make_fit(obs, y):
        def fit(lam, warm):
            return fit_lad_nuclear(obs, y, replace(cfgs.admm, lam=lam),
                                   initial=warm, return_state=True)
        return fit

    grid = lambda_grid(lad_lambda_max(train, z), cfgs.grid_size, cfgs.grid_min_frac)
    lam = cv_lambda(grid, [(make_fit(tr, y), val) for (tr, y), val in folds])
    t0 = time.perf_counter()
    est = fit_lad_nuclear(train, z, replace(cfgs.admm, lam=lam))
    return est, lam, time.perf_counter() - t0


def fit_blocked(train, z, folds, part, cfgs):
    """Tune one multiplier on the per-block penalty rule, like the bench."""
    def make_fit(obs, y):
        blocks = scatter(obs, y, part)
        rules = np.array([theorem_lambda(b.n_rows, b.n_cols, b.n_obs) if b.n_obs
                          else np.nan for b, _ in blocks])
        def fit(s, warm):
            lam = [0.0 if np.isnan(r) else float(s * r) for r in rules]
            est, states = fit_bladmc(obs, y, part, lam=lam, admm_config=cfgs.admm,
                                     initials=warm, return_states=True)
            return est, states
        return fit

    blocks = scatter(train, z, part)
    ratios = [lad_lambda_max(b, y) / theorem_lambda(b.n_rows, b.n_cols, b.n_obs)
              for b, y in blocks if b.n_obs > 0]
    grid = lambda_grid(max(ratios), cfgs.grid_size, cfgs.grid_min_frac)
    s = cv_lambda(grid, [(make_fit(tr, y), val) for (tr, y), val in folds])
    t0 = time.perf_counter()
    est = make_fit(train, z)(s, None)[0]
    return est, s, time.perf_counter() - t0


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--train", required=True, help="provider training ratings file")
    ap.add_argument("--test", required=True, help="provider held-out ratings file")
    ap.add_argument("--out-dir", default="results/movielens")
    ap.add_argument("--methods", default="bladmc,dladmc,mht",
                    help="comma list: bladmc,dladmc,acl,mht (acl is slow)")
    ap.add_argument("--min-count", type=int, default=20)
    ap.add_argument("--outlier-frac", type=float, default=0.0,
                    help="flip this share of 5-ratings to 1 before fitting")
    ap.add_argument("--T", type=int, default=7, help="refinement passes")
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--blocks", type=int, default=2,
                    help="row/column subsets for the blocked initial fit")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    combined, train_tbl, test_tbl = load_provider_split(args.train, args.test,
                                                        min_count=args.min_count)
    if args.outlier_frac > 0.0:
        combined = inject_outliers(combined, args.outlier_frac, seed=args.seed)
        train_tbl = combined.select(combined.tags == 0)
        test_tbl = combined.select(combined.tags == 1)
    n1, n2 = combined.n_users, combined.n_items
    print(f"matrix {n1} x {n2}, train {train_tbl.n_entries}, test {test_tbl.n_entries}")

    train = train_tbl.to_observations()
    test = test_tbl.to_observations()
    z, params = biscale(train)
    folds = scaled_folds(train_tbl, params, args.folds, args.seed)
    cfgs = BenchConfigs()
    m1 = -(-n1 // args.blocks)
    m2 = -(-n2 // args.blocks)
    part = Partition(n1, n2, m1, m2)

    os.makedirs(args.out_dir, exist_ok=True)
    results = {}
    bl_est = None
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for method in methods:
            if method == "mht":
                est, lam, dt = fit_mht(train, z, folds, cfgs)
            elif method == "acl":
                est, lam, dt = fit_acl(train, z, folds, cfgs)
            elif method == "bladmc":
                est, lam, dt = fit_blocked(train, z, folds, part, cfgs)
                bl_est = est
            elif method == "dladmc":
                if bl_est is None:
                    bl_est, _, _ = fit_blocked(train, z, folds, part, cfgs)
                rcfg = RefinementConfig(lambda_rule="validation", t_max=args.T,
                                        rel_change_tol=0.0, m1=m1, m2=m2,
                                        lambda_grid_size=cfgs.grid_size,
                                        lambda_grid_min_frac=cfgs.grid_min_frac)
                t0 = time.perf_counter()
                est, trace = dladmc(train, z, initial=bl_est, cfg=rcfg,
                                    quad_config=cfgs.quad, validation=folds[0][1])
                dt = time.perf_counter() - t0
                lam = [row.lam for row in trace]
            else:
                print(f"unknown method {method!r}", file=sys.stderr)
                return 1
            scored = metrics(params.unscale_matrix(est.values), (test, test.values))
            results[method] = {"rmse": scored.rmse, "mae": scored.mae,
                               "rank": scored.rank, "lambda": lam, "time_s": dt}
            print(f"{method:8s} rmse {scored.rmse:.4f}  mae {scored.mae:.4f}  "
                  f"rank {scored.rank:4d}  time {dt:8.2f}s")

    tag = "out" if args.outlier_frac > 0 else "raw"
    out_path = os.path.join(args.out_dir, f"{tag}_{os.path.basename(args.train)}.json")
    with open(out_path, "w") as fh:
        json.dump({"train": args.train, "test": args.test, "shape": [n1, n2],
                   "outlier_frac": args.outlier_frac, "results": results},
                  fh, indent=2, sort_keys=True)
    print(f"wrote {out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
