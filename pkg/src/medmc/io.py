"""Plain-text readers/writers for observations and dense matrices.

Formats:
  observations   first line "# n1 n2 N", then N lines "row col value"
  dense matrix   first line "n1 n2", then n1 whitespace-separated rows

Floats are written with 17 significant digits so write -> read round-trips
bit for bit.
"""

import numpy as np

from .core import ObservationSet


def _fmt(x):
    return format(float(x), ".17g")


def write_observations(path, obs, responses=None):
    """Write an ObservationSet (optionally with substituted responses)."""
    y = obs.values if responses is None else np.asarray(responses, dtype=np.float64)
    if y.shape != (obs.n_obs,):
        raise ValueError("responses length does not match observation count")
    with open(path, "w") as fh:
        fh.write(f"# {obs.n_rows} {obs.n_cols} {obs.n_obs}\n")
        for i, j, v in zip(obs.rows, obs.cols, y):
            fh.write(f"{i} {j} {_fmt(v)}\n")


def read_observations(path):
    """Parse an observation file, validating the header count and indices."""
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing '# n1 n2 N' header line")
        parts = header[1:].split()
        if len(parts) != 3:
            raise ValueError(f"{path}: header must contain three integers, got {header.strip()!r}")
        try:
            n1, n2, n = (int(p) for p in parts)
        except ValueError as exc:
            raise ValueError(f"{path}: bad header {header.strip()!r}") from exc
        rows = np.empty(n, dtype=np.int64)
        cols = np.empty(n, dtype=np.int64)
        vals = np.empty(n, dtype=np.float64)
        k = 0
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            if k >= n:
                raise ValueError(f"{path}: more entries than header count {n}")
            fields = line.split()
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'row col value', got {line!r}")
            try:
                rows[k] = int(fields[0])
                cols[k] = int(fields[1])
                vals[k] = float(fields[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: cannot parse {line!r}") from exc
            k += 1
        if k != n:
            raise ValueError(f"{path}: header promises {n} entries, found {k}")
    return ObservationSet(n1, n2, rows, cols, vals)


def write_matrix(path, M):
    """Write a dense matrix with a 'n1 n2' header line."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={M.ndim}")
    with open(path, "w") as fh:
        fh.write(f"{M.shape[0]} {M.shape[1]}\n")
        for row in M:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_matrix(path):
    """Parse a dense matrix file written by write_matrix."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: first line must be 'n1 n2'")
        try:
            n1, n2 = int(header[0]), int(header[1])
        except ValueError as exc:
            raise ValueError(f"{path}: bad dimensions {header!r}") from exc
        M = np.empty((n1, n2), dtype=np.float64)
        filled = 0
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            if filled >= n1:
                raise ValueError(f"{path}: more rows than header promises ({n1})")
            fields = line.split()
            if len(fields) != n2:
                raise ValueError(f"{path}:{lineno}: expected {n2} values, got {len(fields)}")
            M[filled] = [float(f) for f in fields]
            filled += 1
        if filled != n1:
            raise ValueError(f"{path}: header promises {n1} rows, found {filled}")
    return M
