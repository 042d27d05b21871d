"""Proximal building blocks and the nuclear-norm regularized least squares solver.

Solves, for observations (i_k, j_k, y_k),

    min_A  (1/N) sum_k (y_k - A[i_k, j_k])^2  +  lam * ||A||_*   s.t. |A_ij| <= box

with an accelerated proximal gradient method forced to be monotone: each
candidate step is kept only if it does not increase the objective, and a
rejected candidate restarts the momentum.  Duplicated cells are aggregated
first, which turns the smooth part into a weighted least squares over unique
cells and makes the gradient a single scatter.
"""

import numpy as np
from dataclasses import dataclass

from .core import MatrixEstimate, NumericalError, as_matrix, resolve_responses

# Above this min-dimension a full SVD per iteration gets expensive; switch to
# a randomized truncated factorization that grows its rank until the nuclear
# threshold is passed.
FULL_SVD_MAX_DIM = 512


def soft_threshold(values, lam):
    """Elementwise max(v - lam, 0); maps a sorted spectrum to a sorted spectrum."""
    if lam < 0:
        raise ValueError(f"threshold must be non-negative, got {lam}")
    v = np.asarray(values, dtype=np.float64)
    return np.maximum(v - lam, 0.0)


def _full_svd(A):
    try:
        return np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        A = np.asarray(A)
        raise NumericalError(
            f"SVD failed on {A.shape[0]}x{A.shape[1]} matrix "
            f"(fro={np.linalg.norm(A):.3e}, max={np.abs(A).max():.3e}): {exc}") from exc


def _randomized_svd(A, k, rng, n_power=4, oversample=10):
    """Truncated SVD via randomized range finding with power iterations."""
    n1, n2 = A.shape
    p = min(k + oversample, min(n1, n2))
    Y = A @ rng.standard_normal((n2, p))
    Q, _ = np.linalg.qr(Y)
    for _ in range(n_power):
        Q, _ = np.linalg.qr(A.T @ Q)
        Q, _ = np.linalg.qr(A @ Q)
    B = Q.T @ A
    Ub, s, Vt = _full_svd(B)
    return (Q @ Ub)[:, :k], s[:k], Vt[:k]


def svt_factors(A, lam):
    """Soft-threshold the spectrum of A.

    Returns (M, s_thr) where M = U diag(max(s - lam, 0)) Vt and s_thr is the
    thresholded spectrum, complete enough that sum(s_thr) = ||M||_*.  Small
    matrices (or lam = 0) take a full SVD; large ones use the randomized
    backend, growing the target rank until every singular value above lam is
    captured.  The randomized path draws from a fixed internal seed, so the
    result is deterministic.
    """
    A = np.ascontiguousarray(as_matrix(A))
    if lam < 0:
        raise ValueError(f"threshold must be non-negative, got {lam}")
    n_min = min(A.shape)
    if n_min <= FULL_SVD_MAX_DIM or lam == 0.0:
        U, s, Vt = _full_svd(A)
        s_thr = np.maximum(s - lam, 0.0)
        k = int(np.count_nonzero(s_thr)) if lam > 0.0 else s.size
        if k == 0:
            return np.zeros_like(A), s_thr
        M = (U[:, :k] * s_thr[:k]) @ Vt[:k]
        return M, s_thr
    rng = np.random.default_rng(0x5FD)
    k = min(32, n_min)
    while True:
        U, s, Vt = _randomized_svd(A, k, rng)
        if s[-1] < lam or k >= n_min:
            break
        k = min(2 * k, n_min)
    s_thr = np.maximum(s - lam, 0.0)
    keep = int(np.count_nonzero(s_thr))
    if keep == 0:
        return np.zeros_like(A), s_thr[:1]
    return (U[:, :keep] * s_thr[:keep]) @ Vt[:keep], s_thr[:keep]


def svt(A, lam):
    """Singular value thresholding, the proximal map of lam * ||.||_*."""
    return svt_factors(A, lam)[0]


@dataclass(eq=False)
class AggregatedEntries:
    """Unique observed cells with multiplicities and mean responses.

    (1/N) sum_k (y_k - A[i_k,j_k])^2
        = (1/N) sum_cells w_ij (ybar_ij - A_ij)^2 + offset,
    where offset = (sum_k y_k^2 - sum_cells w_ij ybar_ij^2) / N does not
    depend on A and is retained so objective values match the raw loss.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    n_total: int
    offset: float

    @property
    def n_cells(self):
        return int(self.rows.size)


def aggregate_duplicates(obs, responses=None):
    """Collapse repeated cells to (multiplicity, mean response) per cell."""
    y = resolve_responses(obs, responses)
    if y.size == 0:
        raise ValueError("aggregation requires at least one observation")
    flat = obs.rows * obs.n_cols + obs.cols
    uniq, inv = np.unique(flat, return_inverse=True)
    w = np.bincount(inv, minlength=uniq.size).astype(np.float64)
    sums = np.bincount(inv, weights=y, minlength=uniq.size)
    means = sums / w
    offset = float((np.sum(y * y) - np.sum(w * means * means)) / y.size)
    return AggregatedEntries(
        n_rows=obs.n_rows, n_cols=obs.n_cols,
        rows=(uniq // obs.n_cols).astype(np.int64),
        cols=(uniq % obs.n_cols).astype(np.int64),
        weights=w, means=means, n_total=int(y.size), offset=offset)


@dataclass
class QuadSolverConfig:
    """Settings for fit_quadratic_nuclear.

    step_rule "fixed" uses the safe Lipschitz constant 2 max(w)/N;
    "backtracking" starts from 2 mean(w)/N and doubles on majorization
    violations, which takes larger steps when a few cells have high
    multiplicity.
    """

    lam: float = 0.0
    box_bound: float = np.inf
    max_iters: int = 500
    rel_tol: float = 1e-6
    step_rule: str = "fixed"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.box_bound <= 0:
            raise ValueError(f"box_bound must be positive, got {self.box_bound}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not (0.0 <= self.rel_tol < 1.0):
            raise ValueError(f"rel_tol must lie in [0, 1), got {self.rel_tol}")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")


def _smooth_value(agg, A):
    r = agg.means - A[agg.rows, agg.cols]
    return float(np.sum(agg.weights * r * r) / agg.n_total + agg.offset)


def _smooth_grad(agg, A):
    g = np.zeros((agg.n_rows, agg.n_cols))
    g[agg.rows, agg.cols] = (2.0 / agg.n_total) * agg.weights * (A[agg.rows, agg.cols] - agg.means)
    return g


def _nuclear_norm(M, s=None):
    if s is not None:
        return float(np.sum(s))
    return float(np.sum(np.linalg.svd(M, compute_uv=False)))


def fit_quadratic_nuclear(obs, responses=None, config=None, initial=None):
    """Nuclear-norm regularized least squares over observed cells.

    Monotone accelerated proximal gradient: candidate = clip(svt(B - G/L)),
    kept only if the full objective does not increase; a rejected candidate
    resets the momentum so the following step is plain proximal descent,
    which cannot increase the objective.  Terminates once the relative
    objective change of an accepted step falls below rel_tol.

    initial warm-starts the iterate (clipped into the box if one is set).
    The returned MatrixEstimate has a non-increasing objective_trace.
    """
    cfg = config if config is not None else QuadSolverConfig()
    agg = aggregate_duplicates(obs, responses)
    n1, n2 = agg.n_rows, agg.n_cols
    lam, box = float(cfg.lam), float(cfg.box_bound)
    boxed = np.isfinite(box)

    backtrack = cfg.step_rule == "backtracking"
    L_max = 2.0 * float(agg.weights.max()) / agg.n_total
    L = 2.0 * float(agg.weights.mean()) / agg.n_total if backtrack else L_max

    if initial is None:
        A = np.zeros((n1, n2))
        s_A = np.zeros(1)
    else:
        A = as_matrix(initial)
        if A.shape != (n1, n2):
            raise ValueError(f"initial shape {A.shape} does not match observations {(n1, n2)}")
        A = np.clip(A, -box, box) if boxed else A.copy()
        s_A = np.linalg.svd(A, compute_uv=False) if lam > 0.0 else None

    F_A = _smooth_value(agg, A) + (lam * _nuclear_norm(A, s_A) if lam > 0.0 else 0.0)
    trace = [F_A]
    B = A
    t_mom = 1.0
    n_done = 0
    converged = False

    for it in range(1, cfg.max_iters + 1):
        n_done = it
        g_B = _smooth_value(agg, B)
        G = _smooth_grad(agg, B)
        while True:
            C = B - G / L
            if lam > 0.0:
                Z, s_thr = svt_factors(C, lam / L)
            else:
                Z, s_thr = C, None
            if boxed:
                Z = np.clip(Z, -box, box)
                s_thr = None
            if not backtrack or L >= L_max:
                break
            # Majorization check g(Z) <= g(B) + <G, Z-B> + (L/2)||Z-B||^2.
            D = Z - B
            bound = g_B + float(np.sum(G * D)) + 0.5 * L * float(np.sum(D * D))
            if _smooth_value(agg, Z) <= bound + 1e-12 * max(abs(bound), 1.0):
                break
            L = min(2.0 * L, L_max)
        F_Z = _smooth_value(agg, Z) + (lam * _nuclear_norm(Z, s_thr) if lam > 0.0 else 0.0)
        if not np.isfinite(F_Z):
            raise NumericalError(
                f"objective became non-finite at iteration {it} (step 1/L = {1.0 / L:.3e})")
        trace.append(min(F_Z, F_A))
        if F_Z <= F_A:
            A_old, A, F_old, F_A, s_A = A, Z, F_A, F_Z, s_thr
            rel = abs(F_old - F_A) / max(abs(F_old), 1e-12)
            if rel <= cfg.rel_tol:
                converged = True
                break
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
            B = A + ((t_mom - 1.0) / t_next) * (A - A_old)
            t_mom = t_next
        else:
            # Restart: with the momentum cleared the next candidate is a plain
            # proximal step from A, which the majorization cannot worsen.
            B = A
            t_mom = 1.0

    if s_A is None or (lam > 0.0 and boxed):
        s_A = np.linalg.svd(A, compute_uv=False) if min(n1, n2) <= FULL_SVD_MAX_DIM \
            else svt_factors(A, 0.0)[1]
    return MatrixEstimate(values=A, singular_values=np.asarray(s_A, dtype=np.float64),
                          iterations_used=n_done, objective_trace=np.asarray(trace),
                          converged=converged, meta={"L": L, "lam": lam})
