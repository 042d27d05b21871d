"""Synthetic benchmark harness: data generation, validation tuning, experiment runner.

Four estimators are compared on low-rank matrices observed through noisy
uniform sampling with replacement:

  mht      nuclear-norm regularized least squares on the raw responses
  acl      full-matrix least absolute deviation ADMM
  bladmc   blocked LAD fits pasted together
  dladmc   bladmc initial estimate plus density-driven refinement passes

Every tuning parameter is selected by minimizing absolute deviation loss on
an independently sampled validation set of the same dimensions.  All
randomness flows from scenario.noise.seed: replication i uses
SeedSequence(seed + i) spawned into matrix / train / validation streams.
"""

import json
import time
import warnings
import numpy as np
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace, asdict

from .core import MatrixEstimate, NumericalError, ObservationSet, metrics
from .prox import QuadSolverConfig, fit_quadratic_nuclear
from .lad_admm import AdmmConfig, fit_lad_nuclear
from .partition import Partition, scatter, theorem_lambda, fit_bladmc
from .refine import (RefinementConfig, dladmc, lambda_grid, quad_lambda_max)

NOISE_KINDS = ("normal", "cauchy", "exponential", "student_t")
METHOD_ORDER = ("bladmc", "dladmc", "acl", "mht")

# SeedSequence stream indices per replication (documented, load-bearing for
# byte-identical reruns): 0 = factor matrix, 1 = training sample, 2 = validation.
STREAM_MATRIX, STREAM_TRAIN, STREAM_VALIDATION = 0, 1, 2


@dataclass(frozen=True)
class NoiseSpec:
    """Noise distribution tag plus the base seed of the experiment."""

    kind: str = "normal"
    seed: int = 0
    df: float = 1.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.kind == "student_t" and self.df <= 0:
            raise ValueError(f"student_t needs df > 0, got {self.df}")


@dataclass(frozen=True)
class SyntheticScenario:
    """One benchmark setting: matrix size, rank, sampling rate, noise.

    center_median subtracts log 2 from exponential noise so its median is
    zero and the median surface is the low-rank matrix itself; with it off,
    errors are measured against the shifted surface A* + log 2.
    """

    scenario_id: str
    n_rows: int
    n_cols: int
    rank: int
    observe_rate: float
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    center_median: bool = True

    def __post_init__(self):
        if self.rank < 1 or self.rank > min(self.n_rows, self.n_cols):
            raise ValueError(f"rank must lie in [1, {min(self.n_rows, self.n_cols)}], got {self.rank}")
        if not (0.0 < self.observe_rate <= 1.0):
            raise ValueError(f"observe_rate must lie in (0, 1], got {self.observe_rate}")

    @property
    def n_obs(self):
        return int(round(self.observe_rate * self.n_rows * self.n_cols))

    @property
    def median_offset(self):
        """Median of the noise; nonzero only for uncentered exponential."""
        if self.noise.kind == "exponential" and not self.center_median:
            return float(np.log(2.0))
        return 0.0


def gen_lowrank(n_rows, n_cols, r, seed):
    """A* = U V^T with i.i.d. standard normal factors; deterministic per seed."""
    if r < 1:
        raise ValueError(f"rank must be positive, got {r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U = rng.standard_normal((n_rows, r))
    V = rng.standard_normal((n_cols, r))
    return U @ V.T


def _draw_noise(rng, scenario, size):
    kind = scenario.noise.kind
    if kind == "normal":
        return rng.standard_normal(size)
    if kind == "cauchy":
        return rng.standard_cauchy(size)
    if kind == "exponential":
        e = rng.exponential(1.0, size)
        return e - np.log(2.0) if scenario.center_median else e
    return rng.standard_t(scenario.noise.df, size)


def sample_observations(A_star, scenario, rng):
    """Uniform with-replacement canonical-basis sample with additive noise.

    Returns (ObservationSet, responses); the set carries the responses as
    its values, the array is returned alongside for call sites that
    substitute pseudo responses later.
    """
    A_star = np.asarray(A_star, dtype=np.float64)
    n1, n2 = A_star.shape
    n = scenario.n_obs
    rows = rng.integers(0, n1, size=n)
    cols = rng.integers(0, n2, size=n)
    y = A_star[rows, cols] + _draw_noise(rng, scenario, n)
    obs = ObservationSet(n1, n2, rows, cols, y)
    return obs, y


def lad_lambda_max(obs, responses=None):
    """Spectral norm of the absolute loss subgradient at zero: for penalties
    at or above it, the zero matrix solves the LAD + nuclear problem."""
    from .core import resolve_responses
    y = resolve_responses(obs, responses)
    if y.size == 0:
        raise ValueError("needs at least one observation")
    G = np.zeros((obs.n_rows, obs.n_cols))
    np.add.at(G, (obs.rows, obs.cols), np.sign(y) / y.size)
    return float(np.linalg.norm(G, 2))


@dataclass
class TuneResult:
    best_lambda: float
    losses: np.ndarray
    best_estimate: MatrixEstimate
    best_index: int
    failures: list = field(default_factory=list)


def tune_lambda(fit, grid, validation):
    """Scan a penalty grid, keep the best held-out absolute deviation loss.

    fit(lam, warm) -> (estimate, warm') is called from the largest penalty
    down so warm can chain solutions along the path.  losses come back
    aligned with the input grid order; ties resolve to the smallest penalty.
    Grid points whose fit raises a numerical or value error are recorded and
    skipped; if every point fails, a RuntimeError lists them all.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=np.float64))
    if grid.size == 0:
        raise ValueError("tuning grid is empty")
    val_obs, val_y = validation if isinstance(validation, tuple) else (validation, None)
    from .core import eval_loss
    losses = np.full(grid.size, np.nan)
    order = np.argsort(grid)[::-1]
    warm = None
    best = None
    failures = []
    for idx in order:
        lam = float(grid[idx])
        try:
            est, warm = fit(lam, warm)
        except (NumericalError, ValueError, FloatingPointError) as exc:
            failures.append((lam, repr(exc)))
            continue
        losses[idx] = eval_loss(val_obs, val_y, est, loss="absolute")
        # Scanning downward, <= hands ties to the smaller penalty.
        if best is None or losses[idx] <= best[0]:
            best = (losses[idx], lam, est, int(idx))
    if best is None:
        raise RuntimeError("every grid point failed: " +
                           "; ".join(f"lam={l:.3e}: {m}" for l, m in failures))
    return TuneResult(best_lambda=best[1], losses=losses, best_estimate=best[2],
                      best_index=best[3], failures=failures)


@dataclass
class BenchConfigs:
    """Solver settings shared by every method in a run."""

    admm: AdmmConfig = field(default_factory=AdmmConfig)
    quad: QuadSolverConfig = field(default_factory=lambda: QuadSolverConfig(
        max_iters=300, rel_tol=1e-6, step_rule="backtracking"))
    refine: RefinementConfig = field(default_factory=lambda: RefinementConfig(
        lambda_rule="validation", t_max=5))
    grid_size: int = 20
    grid_min_frac: float = 1e-4


def _fit_mht(train, val, cfgs):
    grid = lambda_grid(quad_lambda_max(train), cfgs.grid_size, cfgs.grid_min_frac)

    def fit(lam, warm):
        est = fit_quadratic_nuclear(train, None, replace(cfgs.quad, lam=lam), initial=warm)
        return est, est.values

    tuned = tune_lambda(fit, grid, val)
    t0 = time.perf_counter()
    est = fit_quadratic_nuclear(train, None, replace(cfgs.quad, lam=tuned.best_lambda))
    dt = time.perf_counter() - t0
    return est, {"lambda": tuned.best_lambda, "time_s": dt}


def _fit_acl(train, val, cfgs):
    grid = lambda_grid(lad_lambda_max(train), cfgs.grid_size, cfgs.grid_min_frac)

    def fit(lam, warm):
        est, state = fit_lad_nuclear(train, None, replace(cfgs.admm, lam=lam),
                                     initial=warm, return_state=True)
        return est, state

    tuned = tune_lambda(fit, grid, val)
    t0 = time.perf_counter()
    est = fit_lad_nuclear(train, None, replace(cfgs.admm, lam=tuned.best_lambda))
    dt = time.perf_counter() - t0
    return est, {"lambda": tuned.best_lambda, "time_s": dt}


def _fit_bladmc(train, val, part, cfgs, n_workers=None):
    """Tune a common multiplier on the per-block penalty rule."""
    blocks = scatter(train, None, part)
    rules = np.array([theorem_lambda(b.n_rows, b.n_cols, b.n_obs) if b.n_obs else np.nan
                      for b, _ in blocks])
    ratios = [lad_lambda_max(b, y) / rules[i]
              for i, (b, y) in enumerate(blocks) if b.n_obs > 0]
    grid = lambda_grid(max(ratios), cfgs.grid_size, cfgs.grid_min_frac)
    lam_of = lambda s: [0.0 if np.isnan(r) else float(s * r) for r in rules]

    def fit(s, warm):
        est, states = fit_bladmc(train, None, part, lam=lam_of(s), admm_config=cfgs.admm,
                                 n_workers=n_workers, initials=warm, return_states=True)
        return est, states

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tuned = tune_lambda(fit, grid, val)
        t0 = time.perf_counter()
        est = fit_bladmc(train, None, part, lam=lam_of(tuned.best_lambda),
                         admm_config=cfgs.admm, n_workers=n_workers)
        dt = time.perf_counter() - t0
    return est, {"lambda": tuned.best_lambda, "time_s": dt,
                 "block_lambdas": est.meta.get("block_lambdas")}


def _fit_dladmc(train, val, part, cfgs, scenario, initial, initial_time):
    rcfg = replace(cfgs.refine, lambda_rule="validation", r_star=int(scenario.rank),
                   m1=part.m1, m2=part.m2,
                   lambda_grid_size=cfgs.grid_size, lambda_grid_min_frac=cfgs.grid_min_frac)
    est, trace = dladmc(train, None, initial=initial, cfg=rcfg,
                        quad_config=cfgs.quad, validation=val)
    lam_seq = [row.lam for row in trace]
    # Timed replay at the selected penalties, so the clock covers one clean
    # refinement pipeline rather than the whole tuning scan.
    t0 = time.perf_counter()
    est2, trace2 = dladmc(train, None, initial=initial,
                          cfg=replace(rcfg, t_max=len(lam_seq)),
                          quad_config=cfgs.quad, lam_sequence=lam_seq)
    dt = time.perf_counter() - t0
    return est2, trace2, {"lambda_sequence": lam_seq, "time_s": initial_time + dt}


def _run_replication(scenario, methods, part, cfgs, rep, n_workers=None):
    ss = np.random.SeedSequence(scenario.noise.seed + rep)
    streams = ss.spawn(3)
    A_star = gen_lowrank(scenario.n_rows, scenario.n_cols, scenario.rank,
                         np.random.default_rng(streams[STREAM_MATRIX]))
    train, _ = sample_observations(A_star, scenario, np.random.default_rng(streams[STREAM_TRAIN]))
    val, _ = sample_observations(A_star, scenario, np.random.default_rng(streams[STREAM_VALIDATION]))
    target = A_star + scenario.median_offset

    out, errors = {}, {}
    need_bladmc = "bladmc" in methods or "dladmc" in methods
    bl_est, bl_detail = None, None
    if need_bladmc:
        try:
            bl_est, bl_detail = _fit_bladmc(train, val, part, cfgs, n_workers=n_workers)
        except Exception as exc:  # noqa: BLE001 - failures are data, not crashes
            for m in ("bladmc", "dladmc"):
                if m in methods:
                    errors[m] = repr(exc)
    for method in methods:
        if method in errors:
            continue
        try:
            if method == "bladmc":
                est, detail = bl_est, bl_detail
            elif method == "dladmc":
                est, _, detail = _fit_dladmc(train, val, part, cfgs, scenario,
                                             bl_est, bl_detail["time_s"])
            elif method == "mht":
                est, detail = _fit_mht(train, val, cfgs)
            elif method == "acl":
                est, detail = _fit_acl(train, val, cfgs)
            else:
                raise ValueError(f"unknown method {method!r}")
            m = metrics(est, target, wall_time_s=detail["time_s"])
            out[method] = {"rmse": m.rmse, "mae": m.mae, "rank": m.rank,
                           "time_s": detail["time_s"],
                           "lambda": detail.get("lambda", detail.get("lambda_sequence"))}
        except Exception as exc:  # noqa: BLE001
            errors[method] = repr(exc)
    return out, errors


@dataclass
class MethodSummary:
    scenario_id: str
    method: str
    replications: int
    failures: int
    rmse_mean: float
    rmse_std: float | None
    mae_mean: float
    mae_std: float | None
    rank_mean: float
    rank_std: float | None
    time_mean: float


@dataclass
class ExperimentReport:
    scenario: SyntheticScenario
    methods: tuple
    replications: int
    summaries: list
    details: list
    failures: list

    CSV_COLUMNS = ("scenario", "method", "replications", "failures",
                   "rmse_mean", "rmse_std", "mae_mean", "mae_std",
                   "rank_mean", "rank_std")

    def summary(self, method):
        for s in self.summaries:
            if s.method == method:
                return s
        raise KeyError(method)

    def to_csv(self, path):
        """Table-style summary.  Timing is deliberately left to the JSON
        detail so identical reruns produce byte-identical CSV files."""
        def cell(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return format(v, ".10g")
            return str(v)
        with open(path, "w") as fh:
            fh.write(",".join(self.CSV_COLUMNS) + "\n")
            for s in self.summaries:
                fh.write(",".join(cell(v) for v in (
                    s.scenario_id, s.method, s.replications, s.failures,
                    s.rmse_mean, s.rmse_std, s.mae_mean, s.mae_std,
                    s.rank_mean, s.rank_std)) + "\n")

    def to_json(self, path):
        payload = {
            "scenario": asdict(self.scenario),
            "methods": list(self.methods),
            "replications": self.replications,
            "summaries": [asdict(s) for s in self.summaries],
            "details": self.details,
            "failures": self.failures,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_experiment(scenario, methods, replications, part=None, configs=None,
                   n_workers=None):
    """Run `replications` independent draws of a scenario and aggregate.

    methods is an iterable drawn from {"bladmc", "dladmc", "acl", "mht"};
    part is the blocking used by bladmc/dladmc (defaults to halves, a 2x2
    tiling).  Per-replication failures are recorded and excluded from the
    aggregates rather than aborting the run.  Reports are deterministic
    functions of (scenario, methods, replications, configs) apart from the
    timing fields, which only appear in the JSON detail.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in METHOD_ORDER:
            raise ValueError(f"unknown method {m!r}; choose from {METHOD_ORDER}")
    if replications < 1:
        raise ValueError("need at least one replication")
    if part is None:
        part = Partition(scenario.n_rows, scenario.n_cols,
                         max(1, scenario.n_rows // 2), max(1, scenario.n_cols // 2))
    cfgs = configs if configs is not None else BenchConfigs()

    results = [None] * replications
    if n_workers is not None and n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futs = {pool.submit(_run_replication, scenario, methods, part, cfgs, rep): rep
                    for rep in range(replications)}
            for fut, rep in futs.items():
                results[rep] = fut.result()
    else:
        for rep in range(replications):
            results[rep] = _run_replication(scenario, methods, part, cfgs, rep)

    details, failures = [], []
    for rep, (out, errs) in enumerate(results):
        for method, vals in out.items():
            details.append({"rep": rep, "method": method, **vals})
        for method, msg in errs.items():
            failures.append({"rep": rep, "method": method, "error": msg})

    summaries = []
    for method in sorted(methods, key=METHOD_ORDER.index):
        vals = [d for d in details if d["method"] == method]
        n_ok = len(vals)
        n_fail = sum(1 for f in failures if f["method"] == method)
        if n_ok == 0:
            summaries.append(MethodSummary(scenario.scenario_id, method, 0, n_fail,
                                           np.nan, None, np.nan, None, np.nan, None, np.nan))
            continue
        def agg(key):
            arr = np.array([v[key] for v in vals], dtype=np.float64)
            std = float(np.std(arr, ddof=1)) if n_ok >= 2 else None
            return float(arr.mean()), std
        rmse_m, rmse_s = agg("rmse")
        mae_m, mae_s = agg("mae")
        rank_m, rank_s = agg("rank")
        time_m = float(np.mean([v["time_s"] for v in vals]))
        summaries.append(MethodSummary(scenario.scenario_id, method, n_ok, n_fail,
                                       rmse_m, rmse_s, mae_m, mae_s, rank_m, rank_s, time_m))
    return ExperimentReport(scenario=scenario, methods=methods, replications=replications,
                            summaries=summaries, details=details, failures=failures)


# Scenario files: "key = value" lines, # comments.  Keys below; unknown keys
# are rejected so typos fail loudly.
_SCENARIO_KEYS = {
    "id": str, "n_rows": int, "n_cols": int, "rank": int, "observe_rate": float,
    "noise": str, "center_median": bool, "seed": int, "df": float,
    "m1": int, "m2": int, "reps": int, "methods": str, "t_max": int,
    "grid_size": int, "grid_min_frac": float,
}


def _parse_value(raw, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    return typ(raw)


def load_scenario_file(path):
    """Parse a scenario config into a raw settings dict (validated keys)."""
    settings = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _SCENARIO_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r} "
                                 f"(known: {sorted(_SCENARIO_KEYS)})")
            try:
                settings[key] = _parse_value(raw, _SCENARIO_KEYS[key])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return settings


def scenario_from_settings(settings, seed_override=None):
    """Build (SyntheticScenario, extras) from a settings dict.

    extras carries runner knobs (reps, methods, m1, m2, t_max, grid_*)
    that are not part of the scenario identity.
    """
    required = ("n_rows", "n_cols", "rank", "observe_rate", "noise")
    missing = [k for k in required if k not in settings]
    if missing:
        raise ValueError(f"scenario config is missing keys: {missing}")
    seed = seed_override if seed_override is not None else settings.get("seed", 0)
    noise = NoiseSpec(kind=settings["noise"], seed=int(seed),
                      df=float(settings.get("df", 1.0)))
    default_id = f"{settings['noise']}-{settings['n_rows']}x{settings['n_cols']}-r{settings['rank']}"
    scenario = SyntheticScenario(
        scenario_id=settings.get("id", default_id),
        n_rows=settings["n_rows"], n_cols=settings["n_cols"], rank=settings["rank"],
        observe_rate=settings["observe_rate"], noise=noise,
        center_median=settings.get("center_median", True))
    extras = {k: settings[k] for k in ("m1", "m2", "reps", "methods", "t_max",
                                       "grid_size", "grid_min_frac") if k in settings}
    return scenario, extras
