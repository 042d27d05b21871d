"""Ratings-data pipeline: parsing, degree filtering, outlier injection,
bi-scaling, and train/test splitting.

Tables keep the original user/item ids plus compact index maps (sorted
unique ids -> 0-based positions), so estimates and held-out entries always
agree on matrix coordinates.  An optional per-entry tag survives every
transformation, which is how provider-defined train/test splits are carried
through joint filtering.
"""

import warnings
import numpy as np
from dataclasses import dataclass, field

from .core import ObservationSet


@dataclass(eq=False)
class RatingsTable:
    """Aligned (user, item, rating) triples plus compact id maps.

    user_ids/item_ids are sorted arrays of original ids; the compact index
    of an id is its position, a bijection onto [0, n_users) / [0, n_items).
    By default the maps are derived from the entries; passing them
    explicitly lets a subset share its parent's coordinates.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: np.ndarray = None
    item_ids: np.ndarray = None
    tags: np.ndarray = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (self.users.shape == self.items.shape == self.ratings.shape):
            raise ValueError("users/items/ratings must be aligned 1-d arrays")
        if self.user_ids is None:
            self.user_ids = np.unique(self.users)
        else:
            self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        if self.item_ids is None:
            self.item_ids = np.unique(self.items)
        else:
            self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        for name, ids in (("user", self.user_ids), ("item", self.item_ids)):
            if ids.size != np.unique(ids).size:
                raise ValueError(f"{name} id map contains duplicates")
        if self.tags is not None:
            self.tags = np.asarray(self.tags)
            if self.tags.shape != self.users.shape:
                raise ValueError("tags must align with entries")

    @property
    def n_entries(self):
        return int(self.users.size)

    @property
    def n_users(self):
        return int(self.user_ids.size)

    @property
    def n_items(self):
        return int(self.item_ids.size)

    @staticmethod
    def _compact(ids, values, name):
        idx = np.searchsorted(ids, values)
        if values.size:
            safe = np.minimum(idx, ids.size - 1) if ids.size else idx
            if ids.size == 0 or np.any(idx >= ids.size) or np.any(ids[safe] != values):
                raise ValueError(f"entry references a {name} id outside the map")
        return idx

    def rows(self):
        """Compact row index of each entry."""
        return self._compact(self.user_ids, self.users, "user")

    def cols(self):
        return self._compact(self.item_ids, self.items, "item")

    def to_observations(self):
        """ObservationSet on the compact n_users x n_items grid."""
        if self.n_entries == 0:
            raise ValueError("cannot build observations from an empty table")
        return ObservationSet(self.n_users, self.n_items, self.rows(), self.cols(),
                              self.ratings)

    def select(self, mask):
        """Entry subset sharing this table's id maps."""
        mask = np.asarray(mask)
        return RatingsTable(self.users[mask], self.items[mask], self.ratings[mask],
                            user_ids=self.user_ids, item_ids=self.item_ids,
                            tags=None if self.tags is None else self.tags[mask])


def parse_movielens(path):
    """Parse ratings lines `user item rating [timestamp]`, tab or `::` separated.

    Ratings outside [1, 5] or malformed lines raise ValueError with the
    offending line number.  An empty file gives an empty table.
    """
    users, items, ratings = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("::") if "::" in line else line.split()
            if len(fields) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 'user item rating [timestamp]', "
                                 f"got {line!r}")
            try:
                u, i, r = int(fields[0]), int(fields[1]), float(fields[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: cannot parse {line!r}") from exc
            if not (1.0 <= r <= 5.0):
                raise ValueError(f"{path}:{lineno}: rating {r} outside [1, 5]")
            users.append(u)
            items.append(i)
            ratings.append(r)
    return RatingsTable(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                        np.array(ratings))


def merge_tables(a, b, tag_a=0, tag_b=1):
    """Union of two tables with per-entry provenance tags.

    Duplicate (user, item) pairs across the two inputs raise ValueError:
    provider splits must be disjoint.
    """
    users = np.concatenate([a.users, b.users])
    items = np.concatenate([a.items, b.items])
    key_items = np.unique(items)
    keys = users.astype(np.int64) * (key_items.max() + 1 if key_items.size else 1) + items
    if np.unique(keys).size != keys.size:
        raise ValueError("train/test splits overlap: same (user, item) pair on both sides")
    return RatingsTable(users, items, np.concatenate([a.ratings, b.ratings]),
                        tags=np.concatenate([np.full(a.n_entries, tag_a),
                                             np.full(b.n_entries, tag_b)]))


def filter_min_counts(table, k, single_pass=False):
    """Drop users/items with fewer than k ratings; reindex compactly.

    The default iterates removal to a fixed point, since deleting an item
    can push a user below the threshold again.  single_pass applies one
    round of the criterion computed on the input counts, the literal reading
    of "keep rows and columns with at least k ratings".
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    users, items = table.users, table.items
    keep = np.ones(users.size, dtype=bool)
    while True:
        u_kept, u_inv = np.unique(users[keep], return_inverse=True)
        u_counts = np.bincount(u_inv)
        i_kept, i_inv = np.unique(items[keep], return_inverse=True)
        i_counts = np.bincount(i_inv)
        bad_u = set(u_kept[u_counts < k].tolist())
        bad_i = set(i_kept[i_counts < k].tolist())
        if not bad_u and not bad_i:
            break
        drop = np.zeros(users.size, dtype=bool)
        if bad_u:
            drop |= np.isin(users, list(bad_u))
        if bad_i:
            drop |= np.isin(items, list(bad_i))
        keep &= ~drop
        if not keep.any():
            raise ValueError(f"filtering at k={k} removed every entry")
        if single_pass:
            break
    out = RatingsTable(users[keep], items[keep], table.ratings[keep],
                       tags=None if table.tags is None else table.tags[keep])
    return out


def inject_outliers(table, fraction, seed):
    """Turn round(fraction * #fives) randomly chosen 5-ratings into 1s.

    Rounding is half-up.  Only ratings equal to 5 are touched and they
    become exactly 1.  Deterministic per seed.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    fives = np.flatnonzero(table.ratings == 5.0)
    count = int(np.floor(fraction * fives.size + 0.5))
    ratings = table.ratings.copy()
    if count:
        rng = np.random.default_rng(seed)
        hit = rng.choice(fives, size=count, replace=False)
        ratings[hit] = 1.0
    return RatingsTable(table.users, table.items, ratings,
                        user_ids=table.user_ids, item_ids=table.item_ids,
                        tags=table.tags)


@dataclass
class BiScaleParams:
    """Row/column centers and scales fitted on observed entries.

    transform/inverse are exact inverses: z = (y - rc_i - cc_j)/(rs_i cs_j).
    """

    row_center: np.ndarray
    row_scale: np.ndarray
    col_center: np.ndarray
    col_scale: np.ndarray
    iterations: int = 0
    converged: bool = True

    def __post_init__(self):
        if np.any(np.asarray(self.row_scale) <= 0) or np.any(np.asarray(self.col_scale) <= 0):
            raise ValueError("scales must be positive")

    def transform(self, obs, responses=None):
        y = obs.values if responses is None else np.asarray(responses, dtype=np.float64)
        i, j = obs.rows, obs.cols
        return (y - self.row_center[i] - self.col_center[j]) / \
            (self.row_scale[i] * self.col_scale[j])

    def inverse(self, obs, scaled):
        i, j = obs.rows, obs.cols
        return np.asarray(scaled) * (self.row_scale[i] * self.col_scale[j]) \
            + self.row_center[i] + self.col_center[j]

    def unscale_matrix(self, values):
        """Map a fitted matrix on the scaled data back to the rating scale."""
        V = np.asarray(values, dtype=np.float64)
        return V * np.outer(self.row_scale, self.col_scale) \
            + self.row_center[:, None] + self.col_center[None, :]


def biscale(obs, responses=None, max_iters=500, tol=1e-6):
    """Alternately center and scale rows/columns of the observed entries.

    Method-of-moments sweeps: each pass absorbs the current row means into
    the row centers (closed form, accounting for the column scales), then
    the column means, then rescales rows and columns by their standard
    deviations.  Stops when no center or scale moved by more than tol;
    hitting max_iters returns the last iterate with converged=False.

    Every row and column must carry at least one observation, and scale
    updates skip groups with zero variance (single observation, ties).

    Returns (scaled responses, BiScaleParams).
    """
    y = obs.values if responses is None else np.asarray(responses, dtype=np.float64)
    if y.shape != (obs.n_obs,):
        raise ValueError("responses must align with observations")
    if y.size == 0:
        raise ValueError("biscale requires observations")
    i, j = obs.rows, obs.cols
    n1, n2 = obs.n_rows, obs.n_cols
    row_cnt = np.bincount(i, minlength=n1).astype(np.float64)
    col_cnt = np.bincount(j, minlength=n2).astype(np.float64)
    if np.any(row_cnt == 0) or np.any(col_cnt == 0):
        empty_r = np.flatnonzero(row_cnt == 0)[:3]
        empty_c = np.flatnonzero(col_cnt == 0)[:3]
        raise ValueError(f"biscale needs every row/column observed; empty rows {empty_r}, "
                         f"columns {empty_c}")

    rc = np.zeros(n1)
    cc = np.zeros(n2)
    rs = np.ones(n1)
    cs = np.ones(n2)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        rc0, cc0, rs0, cs0 = rc.copy(), cc.copy(), rs.copy(), cs.copy()

        # Row centers: z_ij = (y - rc_i - cc_j)/(rs_i cs_j); the shift that
        # zeroes row i's mean of z is delta_i = rs_i mean_j(z) / mean_j(1/cs_j).
        z = (y - rc[i] - cc[j]) / (rs[i] * cs[j])
        mean_z = np.bincount(i, weights=z, minlength=n1) / row_cnt
        mean_inv = np.bincount(i, weights=1.0 / cs[j], minlength=n1) / row_cnt
        rc = rc + rs * mean_z / mean_inv

        z = (y - rc[i] - cc[j]) / (rs[i] * cs[j])
        mean_z = np.bincount(j, weights=z, minlength=n2) / col_cnt
        mean_inv = np.bincount(j, weights=1.0 / rs[i], minlength=n2) / col_cnt
        cc = cc + cs * mean_z / mean_inv

        z = (y - rc[i] - cc[j]) / (rs[i] * cs[j])
        m1 = np.bincount(i, weights=z, minlength=n1) / row_cnt
        m2 = np.bincount(i, weights=z * z, minlength=n1) / row_cnt
        var = np.maximum(m2 - m1 * m1, 0.0)
        good = var > 1e-24
        rs = np.where(good, rs * np.sqrt(np.where(good, var, 1.0)), rs)

        z = (y - rc[i] - cc[j]) / (rs[i] * cs[j])
        m1 = np.bincount(j, weights=z, minlength=n2) / col_cnt
        m2 = np.bincount(j, weights=z * z, minlength=n2) / col_cnt
        var = np.maximum(m2 - m1 * m1, 0.0)
        good = var > 1e-24
        cs = np.where(good, cs * np.sqrt(np.where(good, var, 1.0)), cs)

        move = max(np.abs(rc - rc0).max(), np.abs(cc - cc0).max(),
                   np.abs(rs - rs0).max(), np.abs(cs - cs0).max())
        if move < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"biscale did not converge in {max_iters} sweeps", RuntimeWarning)
    params = BiScaleParams(row_center=rc, row_scale=rs, col_center=cc, col_scale=cs,
                           iterations=it, converged=converged)
    return params.transform(obs, y), params


def split_folds(table, n_folds, seed):
    """Random disjoint covering folds; returns [(train_obs, heldout_obs), ...].

    Both sides of every pair live on the table's compact grid, so estimates
    fitted on one fold evaluate directly on its complement.  Deterministic
    per seed.
    """
    if n_folds < 2:
        raise ValueError(f"need at least 2 folds, got {n_folds}")
    if table.n_entries < n_folds:
        raise ValueError(f"cannot cut {table.n_entries} entries into {n_folds} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(table.n_entries)
    parts = np.array_split(perm, n_folds)
    pairs = []
    for p in parts:
        held = np.zeros(table.n_entries, dtype=bool)
        held[p] = True
        pairs.append((table.select(~held).to_observations(),
                      table.select(held).to_observations()))
    return pairs


def load_provider_split(train_path, test_path, min_count=0, single_pass=False):
    """Provider-defined split: parse both files, filter jointly, split back.

    Returns (combined, train, test) RatingsTables; train/test share the
    combined table's id maps, so their observation sets agree on matrix
    coordinates.  Overlapping (user, item) pairs between the files raise
    ValueError.
    """
    combined = merge_tables(parse_movielens(train_path), parse_movielens(test_path))
    if min_count > 0:
        combined = filter_min_counts(combined, min_count, single_pass=single_pass)
    train = combined.select(combined.tags == 0)
    test = combined.select(combined.tags == 1)
    return combined, train, test
