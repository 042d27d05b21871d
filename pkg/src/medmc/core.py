"""Observation model, losses, error metrics and shared numeric plumbing.

The data model is trace regression under the matrix completion design:
each sample is a (row, col, value) triple where value = A*[row, col] + noise
and cells are drawn with replacement, so the same cell can occur several
times with different values.
"""

import numpy as np
from dataclasses import dataclass, field


class NumericalError(RuntimeError):
    """A solver produced non-finite values or a factorization failed."""


def _index_array(x, n, name):
    a = np.atleast_1d(np.asarray(x, dtype=np.int64))
    if a.ndim != 1:
        raise ValueError(f"{name} indices must be one-dimensional, got shape {a.shape}")
    if a.size and (a.min() < 0 or a.max() >= n):
        raise IndexError(f"{name} index out of range [0, {n})")
    return a


@dataclass(eq=False)
class ObservationSet:
    """Repeated samples of a partially observed n_rows x n_cols matrix.

    rows/cols are int64 arrays of equal length N; values holds the measured
    responses aligned with them.  Entries may repeat.  An empty set (N = 0)
    is legal as a container, e.g. for an unlucky block of a partition, but
    the fitting routines require N >= 1.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.n_rows <= 0 or self.n_cols <= 0:
            raise ValueError(f"matrix dimensions must be positive, got {self.n_rows} x {self.n_cols}")
        self.rows = _index_array(self.rows, self.n_rows, "row")
        self.cols = _index_array(self.cols, self.n_cols, "col")
        self.values = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if not (self.rows.shape == self.cols.shape == self.values.shape):
            raise ValueError(
                f"rows/cols/values lengths differ: {self.rows.size}, {self.cols.size}, {self.values.size}")
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise ValueError("observation values must be finite")

    @property
    def n_obs(self):
        return int(self.rows.size)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @classmethod
    def from_entries(cls, n_rows, n_cols, entries):
        """Build from an iterable of (row, col, value) triples."""
        entries = list(entries)
        if entries:
            r, c, v = (np.asarray(x) for x in zip(*entries))
        else:
            r = c = v = np.empty(0)
        return cls(n_rows, n_cols, r, c, v)

    def with_values(self, values):
        """Same design (rows/cols), different responses."""
        return ObservationSet(self.n_rows, self.n_cols, self.rows, self.cols, values)


def resolve_responses(obs, responses):
    """Return the response vector for a fit: explicit array or obs.values."""
    if responses is None:
        return obs.values
    r = np.atleast_1d(np.asarray(responses, dtype=np.float64))
    if r.shape != (obs.n_obs,):
        raise ValueError(f"responses length {r.size} does not match {obs.n_obs} observations")
    return r


@dataclass(eq=False)
class MatrixEstimate:
    """A fitted matrix plus solver diagnostics.

    singular_values may be None when the solver did not need a final SVD;
    metrics and rank computations fall back to computing one on demand.
    """

    values: np.ndarray
    singular_values: np.ndarray | None = None
    iterations_used: int = 0
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    converged: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"estimate must be a matrix, got ndim={self.values.ndim}")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("matrix estimate contains non-finite entries")
        if self.singular_values is not None:
            s = np.asarray(self.singular_values, dtype=np.float64)
            if s.size and (np.any(s < -1e-12) or np.any(np.diff(s) > 1e-10 * max(s[0], 1.0))):
                raise ValueError("singular values must be non-negative and non-increasing")
            self.singular_values = s
        self.objective_trace = np.asarray(self.objective_trace, dtype=np.float64)

    @property
    def shape(self):
        return self.values.shape


def as_matrix(A):
    """Accept MatrixEstimate or plain array, return the float matrix."""
    if isinstance(A, MatrixEstimate):
        return A.values
    M = np.asarray(A, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={M.ndim}")
    return M


def entry_of(entry, A):
    """Value of A at a single (row, col) design point."""
    i, j = entry
    return as_matrix(A)[int(i), int(j)]


def eval_loss(obs, responses, A, loss="absolute"):
    """Empirical loss (1/N) sum_k rho(y_k - A[i_k, j_k]).

    loss is "absolute" or "squared".  Summation uses a fixed array order so
    repeated calls on identical inputs are bit-reproducible.
    """
    y = resolve_responses(obs, responses)
    if y.size == 0:
        raise ValueError("eval_loss requires at least one observation")
    M = as_matrix(A)
    if M.shape != (obs.n_rows, obs.n_cols):
        raise ValueError(f"matrix shape {M.shape} does not match observations {obs.shape}")
    r = y - M[obs.rows, obs.cols]
    if loss == "absolute":
        return float(np.sum(np.abs(r)) / y.size)
    if loss == "squared":
        return float(np.sum(r * r) / y.size)
    raise ValueError(f"unknown loss {loss!r}")


def numeric_rank(A, rel_tol=1e-6):
    """Number of singular values above rel_tol * largest.

    Uses precomputed singular values when A is a MatrixEstimate that has
    them, otherwise runs an SVD.  The zero matrix has rank 0.
    """
    if not (0.0 < rel_tol < 1.0):
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    if isinstance(A, MatrixEstimate) and A.singular_values is not None and A.singular_values.size:
        s = A.singular_values
    else:
        M = as_matrix(A)
        if not np.all(np.isfinite(M)):
            raise ValueError("numeric_rank requires finite entries")
        s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


@dataclass
class Metrics:
    """Error summary of an estimate against a reference."""

    rmse: float
    mae: float
    rank: int
    wall_time_s: float = 0.0
    n_compared: int = 0

    def __post_init__(self):
        if self.rmse < 0 or self.mae < 0:
            raise ValueError("rmse/mae must be non-negative")


def metrics(A_hat, reference, rank_rel_tol=1e-6, wall_time_s=0.0):
    """RMSE / MAE / numeric rank of A_hat against a reference.

    reference is either a full matrix of the same shape (errors over every
    cell) or an (ObservationSet, responses) pair / plain ObservationSet
    (errors over the held-out entries only).  Entry order does not affect
    the result beyond float round-off.
    """
    M = as_matrix(A_hat)
    if isinstance(reference, ObservationSet):
        reference = (reference, None)
    if isinstance(reference, tuple):
        obs, resp = reference
        y = resolve_responses(obs, resp)
        if y.size == 0:
            raise ValueError("metrics against observations requires at least one entry")
        if M.shape != (obs.n_rows, obs.n_cols):
            raise ValueError(f"matrix shape {M.shape} does not match observations {obs.shape}")
        diff = y - M[obs.rows, obs.cols]
    else:
        R = as_matrix(reference)
        if R.shape != M.shape:
            raise ValueError(f"shape mismatch: estimate {M.shape} vs reference {R.shape}")
        diff = (R - M).ravel()
    rmse = float(np.sqrt(np.mean(diff * diff)))
    mae = float(np.mean(np.abs(diff)))
    return Metrics(rmse=rmse, mae=mae, rank=numeric_rank(A_hat, rank_rel_tol),
                   wall_time_s=wall_time_s, n_compared=int(diff.size))
