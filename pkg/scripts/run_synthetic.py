#!/usr/bin/env python3
"""Replication study over the four synthetic noise settings.

Feeds every scenario config through the bench runner and prints one
combined summary table at the end.  Defaults to the four configs in
scripts/scenarios/.  At full scale (400x400, three methods, 20 reps)
budget roughly an hour per scenario on a single core; pass --reps 2
for a smoke run.

    python3 scripts/run_synthetic.py --out-dir results/synthetic
    python3 scripts/run_synthetic.py --reps 2 --methods bladmc,dladmc
"""

import argparse
import csv
import glob
import os
import sys

from medmc.cli import dispatch


def main(argv=None):
    here = os.path.dirname(os.path.abspath(__file__))
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scenarios", nargs="*", default=None,
                    help="scenario config files (default: scripts/scenarios/*.cfg)")
    ap.add_argument("--out-dir", default="results/synthetic")
    ap.add_argument("--reps", type=int, default=None, help="override config reps")
    ap.add_argument("--methods", default=None, help="override config method list")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args(argv)

    configs = args.scenarios or sorted(glob.glob(os.path.join(here, "scenarios", "*.cfg")))
    if not configs:
        print("no scenario configs found", file=sys.stderr)
        return 1

    rows = []
    for cfg in configs:
        stem = os.path.splitext(os.path.basename(cfg))[0]
        out = os.path.join(args.out_dir, stem)
        cmd = ["bench", "--scenario", cfg, "--out-dir", out]
        for flag, val in (("--reps", args.reps), ("--methods", args.methods),
                          ("--seed", args.seed), ("--threads", args.threads)):
            if val is not None:
                cmd += [flag, str(val)]
        print(f"== {stem} -> {out}")
        code = dispatch(cmd)
        if code != 0:
            return code
        with open(os.path.join(out, "report.csv")) as fh:
            rows.extend(list(csv.DictReader(fh)))

    if rows:
        cols = ("scenario", "method", "replications", "failures",
                "rmse_mean", "rmse_std", "mae_mean", "rank_mean")
        widths = [max(len(c), max(len(r.get(c, "")) for r in rows)) for c in cols]
        print()
        print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
        for r in rows:
            print("  ".join(r.get(c, "").ljust(w) for c, w in zip(cols, widths)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
