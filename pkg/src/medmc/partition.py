"""Row/column blocking, scatter/gather of observations, and the blocked LAD fit.

The matrix is cut into ceil(n1/m1) x ceil(n2/m2) tiles of size at most
m1 x m2 (edge tiles may be smaller).  Each tile is fitted independently as a
small LAD + nuclear problem and the results are pasted back together.  Block
fits share nothing, so the assembled estimate is bitwise independent of how
many workers ran them.
"""

import os
import warnings
import numpy as np
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .core import MatrixEstimate, ObservationSet, as_matrix, resolve_responses
from .lad_admm import AdmmConfig, fit_lad_nuclear


@dataclass(frozen=True)
class Partition:
    """Regular blocking of an n_rows x n_cols grid into m1 x m2 tiles."""

    n_rows: int
    n_cols: int
    m1: int
    m2: int

    def __post_init__(self):
        if not (1 <= self.m1 <= self.n_rows):
            raise ValueError(f"m1 must lie in [1, {self.n_rows}], got {self.m1}")
        if not (1 <= self.m2 <= self.n_cols):
            raise ValueError(f"m2 must lie in [1, {self.n_cols}], got {self.m2}")

    @property
    def l1(self):
        return -(-self.n_rows // self.m1)

    @property
    def l2(self):
        return -(-self.n_cols // self.m2)

    @property
    def n_blocks(self):
        return self.l1 * self.l2

    def row_range(self, bi):
        return bi * self.m1, min((bi + 1) * self.m1, self.n_rows)

    def col_range(self, bj):
        return bj * self.m2, min((bj + 1) * self.m2, self.n_cols)

    def block_shape(self, bi, bj):
        r0, r1 = self.row_range(bi)
        c0, c1 = self.col_range(bj)
        return r1 - r0, c1 - c0

    def block_of(self, i, j):
        """Block coordinates (bi, bj) of cell (i, j); accepts arrays."""
        return np.asarray(i) // self.m1, np.asarray(j) // self.m2

    def to_line(self):
        return f"{self.n_rows} {self.n_cols} {self.m1} {self.m2}"

    @classmethod
    def from_line(cls, line):
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"partition line must be 'n1 n2 m1 m2', got {line!r}")
        return cls(*(int(p) for p in parts))


def make_partition(n_rows, n_cols, m1, m2):
    return Partition(n_rows, n_cols, m1, m2)


def scatter(obs, responses, part):
    """Split observations into per-block sets with block-local indices.

    Returns a list of (ObservationSet, responses) in row-major block order
    bi * l2 + bj.  Blocks with no observations come back empty.  The sum of
    block counts equals the input count: every entry lands in exactly one
    block.
    """
    if (obs.n_rows, obs.n_cols) != (part.n_rows, part.n_cols):
        raise ValueError(f"partition is for {part.n_rows}x{part.n_cols}, "
                         f"observations are {obs.n_rows}x{obs.n_cols}")
    y = resolve_responses(obs, responses)
    bi = obs.rows // part.m1
    bj = obs.cols // part.m2
    block_id = bi * part.l2 + bj
    order = np.argsort(block_id, kind="stable")
    bounds = np.searchsorted(block_id[order], np.arange(part.n_blocks + 1))
    out = []
    for b in range(part.n_blocks):
        sel = order[bounds[b]:bounds[b + 1]]
        r0, _ = part.row_range(b // part.l2)
        c0, _ = part.col_range(b % part.l2)
        shape = part.block_shape(b // part.l2, b % part.l2)
        out.append((ObservationSet(shape[0], shape[1],
                                   obs.rows[sel] - r0, obs.cols[sel] - c0,
                                   y[sel]),
                    y[sel]))
    return out


def gather(block_estimates, part):
    """Paste per-block estimates (row-major block order) into one matrix."""
    if len(block_estimates) != part.n_blocks:
        raise ValueError(f"expected {part.n_blocks} blocks, got {len(block_estimates)}")
    A = np.empty((part.n_rows, part.n_cols))
    for b, est in enumerate(block_estimates):
        bi, bj = b // part.l2, b % part.l2
        r0, r1 = part.row_range(bi)
        c0, c1 = part.col_range(bj)
        V = as_matrix(est)
        if V.shape != (r1 - r0, c1 - c0):
            raise ValueError(f"block ({bi},{bj}) has shape {V.shape}, expected {(r1 - r0, c1 - c0)}")
        A[r0:r1, c0:c1] = V
    return MatrixEstimate(values=A, meta={"m1": part.m1, "m2": part.m2})


def theorem_lambda(m1, m2, n_obs, constant=1.0):
    """Per-block penalty rule c * sqrt(log(m1 + m2) / (min(m1, m2) * N_block))."""
    if n_obs < 1:
        raise ValueError("lambda rule needs at least one observation")
    return constant * np.sqrt(np.log(m1 + m2) / (min(m1, m2) * n_obs))


def _block_lambdas(lam, rule_constant, blocks, part):
    if lam is None:
        out = []
        for b, (bobs, _) in enumerate(blocks):
            if bobs.n_obs == 0:
                out.append(0.0)
            else:
                out.append(float(theorem_lambda(bobs.n_rows, bobs.n_cols, bobs.n_obs,
                                                rule_constant)))
        return out
    if np.isscalar(lam):
        return [float(lam)] * part.n_blocks
    lams = [float(v) for v in lam]
    if len(lams) != part.n_blocks:
        raise ValueError(f"need {part.n_blocks} per-block lambdas, got {len(lams)}")
    return lams


def fit_bladmc(obs, responses=None, part=None, lam=None, rule_constant=1.0,
               admm_config=None, n_workers=None, initials=None, return_states=False):
    """Blocked LAD fit: scatter, solve each tile with ADMM, gather.

    lam: None for the per-block sqrt(log(m1+m2) / (min(m1,m2) N_l)) rule with
    multiplier rule_constant, a scalar shared by all blocks, or one value per
    block.  initials optionally warm-starts each block (matrix or AdmmState).
    Empty blocks yield zeros with a warning.  Blocks are independent, so the
    result does not depend on n_workers.
    """
    if part is None:
        raise ValueError("fit_bladmc requires a partition")
    y = resolve_responses(obs, responses)
    if y.size == 0:
        raise ValueError("fit requires at least one observation")
    cfg = admm_config if admm_config is not None else AdmmConfig()
    blocks = scatter(obs, y, part)
    lams = _block_lambdas(lam, rule_constant, blocks, part)
    if initials is None:
        initials = [None] * part.n_blocks
    if len(initials) != part.n_blocks:
        raise ValueError(f"need {part.n_blocks} warm starts, got {len(initials)}")

    n_total = y.size
    area = part.n_rows * part.n_cols
    for b, (bobs, _) in enumerate(blocks):
        if bobs.n_obs == 0:
            warnings.warn(f"block {divmod(b, part.l2)} received no observations; "
                          "its estimate is identically zero", RuntimeWarning)
            continue
        expected = n_total * (bobs.n_rows * bobs.n_cols) / area
        if bobs.n_obs > 5.0 * expected or bobs.n_obs < 0.2 * expected:
            warnings.warn(f"block {divmod(b, part.l2)} has {bobs.n_obs} observations vs "
                          f"{expected:.1f} expected under uniform sampling", RuntimeWarning)

    def solve(b):
        bobs, by = blocks[b]
        if bobs.n_obs == 0:
            shape = part.block_shape(b // part.l2, b % part.l2)
            return MatrixEstimate(values=np.zeros(shape)), None
        est, st = fit_lad_nuclear(bobs, by, replace(cfg, lam=lams[b]),
                                  initial=initials[b], return_state=True)
        return est, st

    if n_workers is None:
        n_workers = int(os.environ.get("MEDMC_THREADS", "1"))
    n_workers = max(1, min(n_workers, part.n_blocks))
    if n_workers == 1:
        results = [solve(b) for b in range(part.n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(solve, range(part.n_blocks)))

    ests = [r[0] for r in results]
    out = gather(ests, part)
    out.converged = all(e.converged for e in ests)
    out.iterations_used = max(e.iterations_used for e in ests)
    out.meta.update({
        "block_lambdas": lams,
        "block_counts": [b[0].n_obs for b in blocks],
        "block_converged": [e.converged for e in ests],
    })
    if return_states:
        return out, [r[1] for r in results]
    return out
