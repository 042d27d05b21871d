"""ADMM for least absolute deviation matrix completion with a nuclear penalty.

    min_A  (1/N) sum_k |y_k - A[i_k, j_k]|  +  lam * ||A||_*

Splitting: residuals r_k = y_k - A[i_k, j_k] and a spectral copy Z = A, with
scaled duals dual_r and dual_Z.  One cycle is

    A:  (c_ij + 1) A_ij = sum_{k in cell ij} (y_k - r_k + dual_r_k) + (Z - dual_Z)_ij
        and A = Z - dual_Z on unobserved cells,
    r:  soft threshold of (y - P(A) + dual_r) at 1/(N rho),
    Z:  svt(A + dual_Z, lam / rho),
    duals: dual_r += y - P(A) - r,   dual_Z += A - Z.

The primal residual stacks both constraint gaps; the dual residual is taken
as rho * ||Z_new - Z_old||_F.  With lam = 0 and a single cell observed many
times the fixed point is the sample median, which is the hinge the blocked
initial estimator relies on.
"""

import warnings
import numpy as np
from dataclasses import dataclass, replace

from .core import MatrixEstimate, NumericalError, as_matrix, resolve_responses
from .prox import svt_factors


@dataclass
class AdmmConfig:
    """ADMM settings.

    rho is expressed per sample: the augmented penalty is rho / N, which
    keeps the penalty on the same footing as the (1/N)-scaled loss whatever
    the sample size (the residual soft threshold then equals 1/rho).

    primal_tol/dual_tol are per-root-cell factors: iteration stops once both
    residuals fall below tol * sqrt(n_rows * n_cols).  adapt_rho rebalances
    the penalty (x2 or /2, duals rescaled) when one residual, relative to
    its natural scale, exceeds the other tenfold; it is off by default
    because the fixed per-sample penalty converges faster on every problem
    class exercised here (the two residuals have structurally different
    scales, which residual ratios keep misreading).
    """

    lam: float = 0.0
    rho: float = 1.0
    max_iters: int = 2000
    primal_tol: float = 1e-4
    dual_tol: float = 1e-4
    box_bound: float = np.inf
    adapt_rho: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.primal_tol <= 0 or self.dual_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.box_bound <= 0:
            raise ValueError(f"box_bound must be positive, got {self.box_bound}")


@dataclass(eq=False)
class AdmmState:
    """Iterate of the splitting: matrix copies, per-sample residuals, duals.

    rho here is the effective penalty (already divided by N).  primal_scale
    and dual_scale are the norms the residuals are naturally measured
    against (iterate magnitudes and the dual image respectively).
    """

    A: np.ndarray
    Z: np.ndarray
    r: np.ndarray
    dual_Z: np.ndarray
    dual_r: np.ndarray
    rho: float
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    primal_scale: float = 1.0
    dual_scale: float = 1.0
    z_nuclear: float = 0.0


class _CellIndex:
    """Precomputed map from samples to unique cells (built once per fit)."""

    def __init__(self, obs):
        flat = obs.rows * obs.n_cols + obs.cols
        uniq, inv = np.unique(flat, return_inverse=True)
        self.inv = inv
        self.urows = (uniq // obs.n_cols).astype(np.int64)
        self.ucols = (uniq % obs.n_cols).astype(np.int64)
        self.counts = np.bincount(inv, minlength=uniq.size).astype(np.float64)


def init_state(obs, responses=None, initial=None, rho=None):
    """Fresh AdmmState: A = Z = initial (zeros by default), exact residuals,
    zero duals.  rho is the effective penalty; None means 1/N."""
    y = resolve_responses(obs, responses)
    if y.size == 0:
        raise ValueError("ADMM requires at least one observation")
    if rho is None:
        rho = 1.0 / y.size
    if initial is None:
        A = np.zeros((obs.n_rows, obs.n_cols))
    else:
        A = as_matrix(initial).copy()
        if A.shape != (obs.n_rows, obs.n_cols):
            raise ValueError(f"initial shape {A.shape} does not match observations {obs.shape}")
    return AdmmState(A=A, Z=A.copy(), r=y - A[obs.rows, obs.cols],
                     dual_Z=np.zeros_like(A), dual_r=np.zeros(y.size), rho=float(rho))


def admm_iteration(state, obs, responses=None, config=None, cells=None):
    """One full ADMM cycle (A, r, Z, duals); returns a new state with residuals."""
    cfg = config if config is not None else AdmmConfig()
    y = resolve_responses(obs, responses)
    if y.size == 0:
        raise ValueError("ADMM requires at least one observation")
    if cells is None:
        cells = _CellIndex(obs)
    rho = state.rho
    n = y.size

    A = state.Z - state.dual_Z
    cell_sums = np.bincount(cells.inv, weights=y - state.r + state.dual_r,
                            minlength=cells.counts.size)
    A[cells.urows, cells.ucols] = (cell_sums + A[cells.urows, cells.ucols]) / (cells.counts + 1.0)
    if np.isfinite(cfg.box_bound):
        np.clip(A, -cfg.box_bound, cfg.box_bound, out=A)

    fitted = A[obs.rows, obs.cols]
    v = y - fitted + state.dual_r
    thr = 1.0 / (n * rho)
    r = np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)

    Z, s_thr = svt_factors(A + state.dual_Z, cfg.lam / rho)

    dual_r = state.dual_r + (y - fitted - r)
    dual_Z = state.dual_Z + (A - Z)

    gap_r = y - fitted - r
    gap_Z = A - Z
    primal = float(np.sqrt(np.sum(gap_r * gap_r) + np.sum(gap_Z * gap_Z)))
    dual = float(rho * np.linalg.norm(Z - state.Z))
    # Natural magnitudes for relative residual comparisons: the competing
    # primal norms, and the image of the duals under the constraint adjoint.
    p_scale = max(np.sqrt(np.sum(fitted ** 2) + np.sum(A * A)),
                  np.sqrt(np.sum(r * r) + np.sum(Z * Z)),
                  float(np.linalg.norm(y)), 1e-12)
    dual_img = dual_Z.copy()
    np.add.at(dual_img, (obs.rows, obs.cols), dual_r)
    d_scale = max(rho * float(np.linalg.norm(dual_img)), 1e-12)
    if not (np.isfinite(A).all() and np.isfinite(r).all()):
        raise NumericalError(f"ADMM produced non-finite iterates (rho={rho:.3e}, lam={cfg.lam:.3e})")
    return AdmmState(A=A, Z=Z, r=r, dual_Z=dual_Z, dual_r=dual_r, rho=rho,
                     primal_residual=primal, dual_residual=dual,
                     primal_scale=p_scale, dual_scale=d_scale,
                     z_nuclear=float(np.sum(s_thr)))


def fit_lad_nuclear(obs, responses=None, config=None, initial=None, return_state=False):
    """Run ADMM to convergence; returns a MatrixEstimate (plus the final state
    when return_state is set, useful for warm starts along a tuning path).

    initial may be a matrix (A = Z = initial, duals reset) or a previous
    AdmmState to resume from.  Non-convergence at max_iters is reported via
    converged=False, not an exception.
    """
    cfg = config if config is not None else AdmmConfig()
    y = resolve_responses(obs, responses)
    if y.size == 0:
        raise ValueError("fit requires at least one observation")
    cells = _CellIndex(obs)
    if isinstance(initial, AdmmState):
        state = replace(initial)
    else:
        state = init_state(obs, y, initial=initial, rho=cfg.rho / y.size)

    scale = np.sqrt(obs.n_rows * obs.n_cols)
    p_tol = cfg.primal_tol * scale
    d_tol = cfg.dual_tol * scale
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        state = admm_iteration(state, obs, y, cfg, cells=cells)
        trace.append(float(np.sum(np.abs(y - state.Z[obs.rows, obs.cols])) / y.size)
                     + cfg.lam * state.z_nuclear)
        if state.primal_residual < p_tol and state.dual_residual < d_tol:
            converged = True
            break
        if cfg.adapt_rho and it >= 10 and it % 5 == 0:
            p_rel = state.primal_residual / state.primal_scale
            d_rel = state.dual_residual / state.dual_scale
            if p_rel > 10.0 * d_rel and state.rho < 1e6:
                state.rho *= 2.0
                state.dual_r /= 2.0
                state.dual_Z /= 2.0
            elif d_rel > 10.0 * p_rel and state.rho > 1e-12:
                state.rho /= 2.0
                state.dual_r *= 2.0
                state.dual_Z *= 2.0
    if not converged:
        warnings.warn(f"ADMM stopped at max_iters={cfg.max_iters} with residuals "
                      f"primal={state.primal_residual:.3e}, dual={state.dual_residual:.3e}",
                      RuntimeWarning)
    s_final = np.linalg.svd(state.Z, compute_uv=False)
    est = MatrixEstimate(values=state.Z.copy(), singular_values=s_final,
                         iterations_used=it, objective_trace=np.asarray(trace),
                         converged=converged,
                         meta={"rho": state.rho, "lam": cfg.lam,
                               "primal_residual": state.primal_residual,
                               "dual_residual": state.dual_residual})
    if return_state:
        return est, state
    return est
