"""Median matrix completion: blocked LAD fits refined by density-driven
pseudo-data least squares, with baselines and a benchmark harness."""

__version__ = "0.1.0"

from .core import (Metrics, MatrixEstimate, NumericalError, ObservationSet,
                   entry_of, eval_loss, metrics, numeric_rank)
from .io import read_matrix, read_observations, write_matrix, write_observations
from .prox import (AggregatedEntries, QuadSolverConfig, aggregate_duplicates,
                   fit_quadratic_nuclear, soft_threshold, svt)
from .lad_admm import AdmmConfig, AdmmState, admm_iteration, fit_lad_nuclear, init_state
from .partition import Partition, fit_bladmc, gather, make_partition, scatter, theorem_lambda
from .refine import (F0Estimate, RefinementConfig, RefinementTrace, TraceRow, dladmc,
                     estimate_f0, initial_rate, kernel_biweight, lambda_grid,
                     pseudo_data, quad_lambda_max, rate_schedule, refine_once,
                     relative_change)
from .bench import (BenchConfigs, ExperimentReport, NoiseSpec, SyntheticScenario,
                    gen_lowrank, lad_lambda_max, run_experiment, sample_observations,
                    tune_lambda)
from .ingest import (BiScaleParams, RatingsTable, biscale, filter_min_counts,
                     inject_outliers, load_provider_split, merge_tables,
                     parse_movielens, split_folds)
