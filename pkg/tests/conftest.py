"""Shared test setup: single-threaded BLAS for reproducible numerics."""

import os

# Must happen before numpy is imported anywhere in the test process.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from medmc.core import ObservationSet  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_observations(n_rows, n_cols, n_obs, seed=0, noise=0.0, rank=2):
    """Low-rank ground truth sampled with replacement; returns (obs, A_star)."""
    gen = np.random.default_rng(seed)
    A = gen.standard_normal((n_rows, rank)) @ gen.standard_normal((rank, n_cols))
    rows = gen.integers(0, n_rows, n_obs)
    cols = gen.integers(0, n_cols, n_obs)
    y = A[rows, cols] + noise * gen.standard_normal(n_obs)
    return ObservationSet(n_rows, n_cols, rows, cols, y), A
