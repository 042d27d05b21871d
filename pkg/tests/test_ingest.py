import numpy as np
import pytest

from medmc.core import ObservationSet
from medmc.ingest import (
    BiScaleParams,
    RatingsTable,
    biscale,
    filter_min_counts,
    inject_outliers,
    load_provider_split,
    merge_tables,
    parse_movielens,
    split_folds,
)


def table_from_triples(triples, **kw):
    u, i, r = zip(*triples)
    return RatingsTable(np.array(u), np.array(i), np.array(r, dtype=float), **kw)


class TestParse:
    def test_tab_and_doublecolon(self, tmp_path):
        p = tmp_path / "ratings.dat"
        p.write_text("1\t10\t4.0\t978300760\n2::20::3.5::978300761\n3 30 5\n")
        t = parse_movielens(p)
        assert t.n_entries == 3
        np.testing.assert_array_equal(t.users, [1, 2, 3])
        np.testing.assert_array_equal(t.items, [10, 20, 30])
        np.testing.assert_array_equal(t.ratings, [4.0, 3.5, 5.0])

    def test_three_fields_ok(self, tmp_path):
        p = tmp_path / "r.dat"
        p.write_text("7::3::2.0\n")
        assert parse_movielens(p).n_entries == 1

    def test_malformed_line_lineno(self, tmp_path):
        p = tmp_path / "r.dat"
        p.write_text("1 2 3.0\n1 2\n")
        with pytest.raises(ValueError, match=":2"):
            parse_movielens(p)

    def test_unparseable_rating(self, tmp_path):
        p = tmp_path / "r.dat"
        p.write_text("1 2 high\n")
        with pytest.raises(ValueError, match=":1"):
            parse_movielens(p)

    def test_rating_out_of_range(self, tmp_path):
        p = tmp_path / "r.dat"
        p.write_text("1 2 6.0\n")
        with pytest.raises(ValueError, match="outside"):
            parse_movielens(p)
        p.write_text("1 2 0.5\n")
        with pytest.raises(ValueError, match="outside"):
            parse_movielens(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "r.dat"
        p.write_text("")
        t = parse_movielens(p)
        assert t.n_entries == 0 and t.n_users == 0


class TestRatingsTable:
    def test_compact_maps(self):
        t = table_from_triples([(10, 100, 3.0), (5, 100, 4.0), (10, 7, 2.0)])
        np.testing.assert_array_equal(t.user_ids, [5, 10])
        np.testing.assert_array_equal(t.item_ids, [7, 100])
        np.testing.assert_array_equal(t.rows(), [1, 0, 1])
        np.testing.assert_array_equal(t.cols(), [1, 1, 0])

    def test_duplicate_map_rejected(self):
        with pytest.raises(ValueError, match="duplicates"):
            RatingsTable(np.array([1]), np.array([2]), np.array([3.0]),
                         user_ids=np.array([1, 1]))

    def test_entry_outside_map(self):
        t = RatingsTable(np.array([1, 2]), np.array([5, 5]), np.array([3.0, 4.0]),
                         user_ids=np.array([1, 2, 3]))
        t2 = t.select(np.array([True, False]))
        # selection keeps parent maps even when entries vanish
        assert t2.n_users == 3
        bad = RatingsTable(np.array([9]), np.array([5]), np.array([3.0]),
                           user_ids=np.array([1, 2]))
        with pytest.raises(ValueError, match="outside the map"):
            bad.rows()

    def test_to_observations(self):
        t = table_from_triples([(10, 100, 3.0), (5, 100, 4.0)])
        obs = t.to_observations()
        assert obs.shape == (2, 1)
        np.testing.assert_array_equal(obs.values, [3.0, 4.0])
        empty = t.select(np.zeros(2, dtype=bool))
        with pytest.raises(ValueError):
            empty.to_observations()

    def test_misaligned_rejected(self):
        with pytest.raises(ValueError):
            RatingsTable(np.array([1, 2]), np.array([3]), np.array([4.0]))
        with pytest.raises(ValueError):
            RatingsTable(np.array([1]), np.array([3]), np.array([4.0]),
                         tags=np.array([0, 1]))


class TestMerge:
    def test_tags_and_union(self):
        a = table_from_triples([(1, 1, 3.0), (1, 2, 4.0)])
        b = table_from_triples([(2, 1, 5.0)])
        m = merge_tables(a, b)
        assert m.n_entries == 3
        np.testing.assert_array_equal(m.tags, [0, 0, 1])

    def test_overlap_rejected(self):
        a = table_from_triples([(1, 1, 3.0)])
        b = table_from_triples([(1, 1, 5.0)])
        with pytest.raises(ValueError, match="overlap"):
            merge_tables(a, b)


class TestFilterMinCounts:
    def chain_table(self):
        # core block (users 1,2 x items 1,2) plus a pendant: user 3 rates
        # item 1 and item 3; item 3 has a single rating.
        return table_from_triples([
            (1, 1, 3.0), (1, 2, 3.0), (2, 1, 3.0), (2, 2, 3.0),
            (3, 1, 3.0), (3, 3, 3.0),
        ])

    def test_single_pass_differs_from_fixed_point(self):
        t = self.chain_table()
        one = filter_min_counts(t, 2, single_pass=True)
        # one round drops item 3 only; user 3 is left below threshold
        assert one.n_entries == 5
        assert 3 in one.users
        full = filter_min_counts(t, 2)
        assert full.n_entries == 4
        assert 3 not in full.users

    def test_fixed_point_satisfies_threshold(self):
        full = filter_min_counts(self.chain_table(), 2)
        _, u_counts = np.unique(full.users, return_counts=True)
        _, i_counts = np.unique(full.items, return_counts=True)
        assert u_counts.min() >= 2 and i_counts.min() >= 2

    def test_k_zero_is_identity(self):
        t = self.chain_table()
        out = filter_min_counts(t, 0)
        assert out.n_entries == t.n_entries

    def test_all_removed_raises(self):
        t = table_from_triples([(1, 1, 3.0), (2, 2, 3.0)])
        with pytest.raises(ValueError, match="removed every entry"):
            filter_min_counts(t, 2)

    def test_negative_k(self):
        with pytest.raises(ValueError):
            filter_min_counts(self.chain_table(), -1)

    def test_tags_survive(self):
        t = self.chain_table()
        t = RatingsTable(t.users, t.items, t.ratings, tags=np.arange(6))
        full = filter_min_counts(t, 2)
        np.testing.assert_array_equal(full.tags, [0, 1, 2, 3])


class TestInjectOutliers:
    def fives_table(self, n5=10, n_other=5):
        triples = [(k, k, 5.0) for k in range(n5)]
        triples += [(100 + k, 100 + k, 3.0) for k in range(n_other)]
        return table_from_triples(triples)

    def test_exact_count_and_target_value(self):
        t = self.fives_table(n5=10)
        out = inject_outliers(t, 0.2, seed=0)
        assert np.sum(out.ratings == 1.0) == 2
        assert np.sum(out.ratings == 5.0) == 8
        # non-fives untouched
        assert np.sum(out.ratings == 3.0) == 5

    def test_rounding_half_up(self):
        t = self.fives_table(n5=3)
        out = inject_outliers(t, 0.5, seed=1)  # 1.5 rounds to 2
        assert np.sum(out.ratings == 1.0) == 2

    def test_deterministic(self):
        t = self.fives_table()
        a = inject_outliers(t, 0.3, seed=7)
        b = inject_outliers(t, 0.3, seed=7)
        np.testing.assert_array_equal(a.ratings, b.ratings)
        c = inject_outliers(t, 0.3, seed=8)
        assert not np.array_equal(a.ratings, c.ratings)

    def test_extremes(self):
        t = self.fives_table(n5=4)
        np.testing.assert_array_equal(inject_outliers(t, 0.0, seed=0).ratings, t.ratings)
        allhit = inject_outliers(t, 1.0, seed=0)
        assert np.sum(allhit.ratings == 5.0) == 0
        assert np.sum(allhit.ratings == 1.0) == 4

    def test_fraction_validated(self):
        with pytest.raises(ValueError):
            inject_outliers(self.fives_table(), 1.5, seed=0)

    def test_original_untouched(self):
        t = self.fives_table()
        before = t.ratings.copy()
        inject_outliers(t, 1.0, seed=0)
        np.testing.assert_array_equal(t.ratings, before)


class TestBiscale:
    def dense_obs(self, n1=20, n2=15, seed=0):
        gen = np.random.default_rng(seed)
        Y = 3.0 + 2.0 * gen.standard_normal((n1, n2)) \
            + gen.standard_normal((n1, 1)) + 0.5 * gen.standard_normal((1, n2))
        rows, cols = np.divmod(np.arange(n1 * n2), n2)
        return ObservationSet(n1, n2, rows, cols, Y.ravel())

    def test_roundtrip(self):
        obs = self.dense_obs()
        z, params = biscale(obs)
        back = params.inverse(obs, z)
        np.testing.assert_allclose(back, obs.values, atol=1e-10)

    def test_moments_after_scaling(self):
        obs = self.dense_obs()
        z, params = biscale(obs, max_iters=200, tol=1e-12)
        assert params.converged
        Z = z.reshape(20, 15)
        assert np.abs(Z.mean(axis=1)).max() < 1e-6
        assert np.abs(Z.mean(axis=0)).max() < 1e-6
        assert np.abs(Z.var(axis=1) - 1.0).max() < 1e-6
        assert np.abs(Z.var(axis=0) - 1.0).max() < 1e-6

    def test_unscale_matrix_consistent(self):
        obs = self.dense_obs(8, 6, seed=3)
        z, params = biscale(obs, max_iters=200, tol=1e-12)
        Z = np.zeros((8, 6))
        Z[obs.rows, obs.cols] = z
        back = params.unscale_matrix(Z)
        np.testing.assert_allclose(back[obs.rows, obs.cols],
                                   params.inverse(obs, z), atol=1e-10)

    def test_empty_row_rejected(self):
        obs = ObservationSet(3, 2, [0, 1], [0, 1], [1.0, 2.0])  # row 2 empty
        with pytest.raises(ValueError, match="empty rows"):
            biscale(obs)

    def test_nonconvergence_warns(self):
        obs = self.dense_obs()
        with pytest.warns(RuntimeWarning, match="did not converge"):
            _, params = biscale(obs, max_iters=1)
        assert not params.converged

    def test_params_validate_scales(self):
        with pytest.raises(ValueError):
            BiScaleParams(np.zeros(2), np.array([1.0, -1.0]), np.zeros(2), np.ones(2))


class TestSplitFolds:
    def grid_table(self, n_users=10, n_items=10):
        u, i = np.divmod(np.arange(n_users * n_items), n_items)
        return RatingsTable(u, i, np.full(u.size, 3.0))

    def test_sizes_disjoint_covering(self):
        t = self.grid_table()
        pairs = split_folds(t, 5, seed=0)
        assert len(pairs) == 5
        held_counts = [held.n_obs for _, held in pairs]
        assert held_counts == [20] * 5
        seen = set()
        for train, held in pairs:
            assert train.n_obs == 80
            keys = {(i, j) for i, j in zip(held.rows, held.cols)}
            assert not keys & seen
            seen |= keys
            train_keys = {(i, j) for i, j in zip(train.rows, train.cols)}
            assert not keys & train_keys
        assert len(seen) == 100

    def test_deterministic(self):
        t = self.grid_table()
        a = split_folds(t, 4, seed=3)
        b = split_folds(t, 4, seed=3)
        for (tr1, he1), (tr2, he2) in zip(a, b):
            np.testing.assert_array_equal(he1.rows, he2.rows)
            np.testing.assert_array_equal(he1.values, he2.values)

    def test_validation(self):
        t = self.grid_table()
        with pytest.raises(ValueError):
            split_folds(t, 1, seed=0)
        tiny = table_from_triples([(1, 1, 3.0), (2, 2, 3.0)])
        with pytest.raises(ValueError):
            split_folds(tiny, 3, seed=0)


class TestProviderSplit:
    def write_pair(self, tmp_path):
        train = tmp_path / "u1.base"
        test = tmp_path / "u1.test"
        train.write_text(
            "1\t1\t5.0\n1\t2\t4.0\n2\t1\t3.0\n2\t2\t2.0\n3\t1\t1.0\n3\t3\t4.0\n")
        test.write_text("1\t3\t2.0\n2\t3\t5.0\n")
        return train, test

    def test_joint_filter_shared_coordinates(self, tmp_path):
        train_p, test_p = self.write_pair(tmp_path)
        combined, train, test = load_provider_split(train_p, test_p, min_count=2)
        # user 3's item-3 rating keeps item 3 alive jointly with the test file
        assert combined.n_entries == train.n_entries + test.n_entries
        np.testing.assert_array_equal(train.user_ids, combined.user_ids)
        np.testing.assert_array_equal(test.item_ids, combined.item_ids)
        obs_train = train.to_observations()
        obs_test = test.to_observations()
        assert obs_train.shape == obs_test.shape

    def test_no_filter(self, tmp_path):
        train_p, test_p = self.write_pair(tmp_path)
        combined, train, test = load_provider_split(train_p, test_p)
        assert combined.n_entries == 8
        assert train.n_entries == 6 and test.n_entries == 2

    def test_overlap_detected(self, tmp_path):
        train_p = tmp_path / "a.dat"
        test_p = tmp_path / "b.dat"
        train_p.write_text("1 1 3.0\n")
        test_p.write_text("1 1 4.0\n")
        with pytest.raises(ValueError, match="overlap"):
            load_provider_split(train_p, test_p)
