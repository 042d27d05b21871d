import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medmc.core import ObservationSet
from medmc.lad_admm import AdmmConfig, fit_lad_nuclear
from medmc.partition import (
    Partition,
    fit_bladmc,
    gather,
    make_partition,
    scatter,
    theorem_lambda,
)

from conftest import make_observations


class TestPartition:
    def test_ranges_with_ragged_edge(self):
        p = Partition(5, 4, 2, 2)
        assert (p.l1, p.l2) == (3, 2)
        assert p.n_blocks == 6
        assert [p.row_range(i) for i in range(3)] == [(0, 2), (2, 4), (4, 5)]
        assert [p.col_range(j) for j in range(2)] == [(0, 2), (2, 4)]
        assert p.block_shape(2, 1) == (1, 2)

    def test_square_case(self):
        p = Partition(400, 400, 200, 200)
        assert p.n_blocks == 4
        assert p.block_shape(1, 1) == (200, 200)

    def test_block_of(self):
        p = Partition(400, 400, 200, 200)
        assert p.block_of(250, 100) == (1, 0)
        bi, bj = p.block_of(np.array([0, 399]), np.array([399, 0]))
        np.testing.assert_array_equal(bi, [0, 1])
        np.testing.assert_array_equal(bj, [1, 0])

    def test_validation(self):
        with pytest.raises(ValueError):
            Partition(5, 5, 0, 2)
        with pytest.raises(ValueError):
            Partition(5, 5, 2, 6)

    def test_line_roundtrip(self):
        p = Partition(7, 9, 3, 4)
        assert Partition.from_line(p.to_line()) == p
        with pytest.raises(ValueError):
            Partition.from_line("1 2 3")

    def test_make_partition(self):
        assert make_partition(6, 6, 3, 3) == Partition(6, 6, 3, 3)


class TestScatterGather:
    def test_local_indices(self):
        p = Partition(400, 400, 200, 200)
        obs = ObservationSet(400, 400, [250], [100], [1.0])
        blocks = scatter(obs, None, p)
        # block (1, 0) is row-major index 2
        assert [b[0].n_obs for b in blocks] == [0, 0, 1, 0]
        bobs = blocks[2][0]
        assert (bobs.rows[0], bobs.cols[0]) == (50, 100)
        assert bobs.shape == (200, 200)

    def test_counts_partition_the_input(self, rng):
        p = Partition(10, 8, 3, 3)
        obs, _ = make_observations(10, 8, 60, seed=5)
        blocks = scatter(obs, None, p)
        assert sum(b[0].n_obs for b in blocks) == 60
        assert len(blocks) == p.n_blocks

    def test_shape_mismatch(self):
        p = Partition(4, 4, 2, 2)
        obs = ObservationSet(5, 5, [0], [0], [1.0])
        with pytest.raises(ValueError):
            scatter(obs, None, p)

    def test_gather_pastes_blocks(self):
        p = Partition(4, 4, 2, 2)
        blocks = [np.full((2, 2), float(b)) for b in range(4)]
        A = gather(blocks, p).values
        assert A[0, 0] == 0.0 and A[0, 3] == 1.0
        assert A[3, 0] == 2.0 and A[3, 3] == 3.0

    def test_gather_validates(self):
        p = Partition(4, 4, 2, 2)
        with pytest.raises(ValueError):
            gather([np.zeros((2, 2))] * 3, p)
        with pytest.raises(ValueError):
            gather([np.zeros((2, 2))] * 3 + [np.zeros((3, 3))], p)

    def test_scatter_gather_roundtrip(self, rng):
        p = Partition(9, 7, 4, 3)
        A = rng.standard_normal((9, 7))
        rows = rng.integers(0, 9, 50)
        cols = rng.integers(0, 7, 50)
        obs = ObservationSet(9, 7, rows, cols, A[rows, cols])
        blocks = scatter(obs, None, p)
        # fill each block from its own observations; gathered matrix must
        # reproduce A at every observed cell
        tiles = []
        for b, (bobs, by) in enumerate(blocks):
            T = np.zeros(bobs.shape)
            T[bobs.rows, bobs.cols] = by
            tiles.append(T)
        G = gather(tiles, p).values
        np.testing.assert_array_equal(G[rows, cols], A[rows, cols])

    @settings(max_examples=30, deadline=None)
    @given(n1=st.integers(2, 12), n2=st.integers(2, 12),
           m1=st.integers(1, 12), m2=st.integers(1, 12),
           seed=st.integers(0, 10))
    def test_every_entry_lands_in_its_block(self, n1, n2, m1, m2, seed):
        m1, m2 = min(m1, n1), min(m2, n2)
        p = Partition(n1, n2, m1, m2)
        gen = np.random.default_rng(seed)
        k = 20
        rows = gen.integers(0, n1, k)
        cols = gen.integers(0, n2, k)
        vals = gen.standard_normal(k)
        obs = ObservationSet(n1, n2, rows, cols, vals)
        blocks = scatter(obs, None, p)
        assert sum(b[0].n_obs for b in blocks) == k
        for b, (bobs, by) in enumerate(blocks):
            bi, bj = divmod(b, p.l2)
            r0, _ = p.row_range(bi)
            c0, _ = p.col_range(bj)
            gi, gj = bobs.rows + r0, bobs.cols + c0
            assert np.all(gi // m1 == bi) and np.all(gj // m2 == bj)
            np.testing.assert_array_equal(np.sort(by), np.sort(vals[(rows // m1 == bi) & (cols // m2 == bj)]))


class TestTheoremLambda:
    def test_formula(self):
        expected = np.sqrt(np.log(300) / (100 * 5000))
        assert theorem_lambda(100, 200, 5000) == pytest.approx(expected, rel=1e-12)
        assert theorem_lambda(100, 200, 5000, constant=2.5) == pytest.approx(2.5 * expected, rel=1e-12)

    def test_needs_observations(self):
        with pytest.raises(ValueError):
            theorem_lambda(10, 10, 0)


class TestFitBladmc:
    def test_single_block_equals_plain_fit(self, rng):
        obs, _ = make_observations(6, 6, 30, seed=3, noise=0.5)
        p = Partition(6, 6, 6, 6)
        cfg = AdmmConfig(lam=0.05)
        blocked = fit_bladmc(obs, part=p, lam=0.05, admm_config=cfg)
        plain = fit_lad_nuclear(obs, config=cfg)
        np.testing.assert_allclose(blocked.values, plain.values, atol=1e-10)

    def test_rank_subadditive(self, rng):
        obs, _ = make_observations(12, 12, 250, seed=7, noise=0.3)
        p = Partition(12, 12, 6, 6)
        est = fit_bladmc(obs, part=p, lam=0.3)
        block_ranks = []
        for b in range(p.n_blocks):
            bi, bj = divmod(b, p.l2)
            r0, r1 = p.row_range(bi)
            c0, c1 = p.col_range(bj)
            s = np.linalg.svd(est.values[r0:r1, c0:c1], compute_uv=False)
            block_ranks.append(int(np.sum(s > 1e-8 * max(s[0], 1.0))))
        s = np.linalg.svd(est.values, compute_uv=False)
        full_rank = int(np.sum(s > 1e-8 * max(s[0], 1.0)))
        assert full_rank <= sum(block_ranks)

    def test_default_lambda_is_per_block_rule(self, rng):
        obs, _ = make_observations(8, 8, 64, seed=9, noise=0.2)
        p = Partition(8, 8, 4, 4)
        est = fit_bladmc(obs, part=p, rule_constant=0.7)
        blocks = scatter(obs, None, p)
        for lam_b, (bobs, _) in zip(est.meta["block_lambdas"], blocks):
            assert lam_b == pytest.approx(theorem_lambda(4, 4, bobs.n_obs, 0.7), rel=1e-12)

    def test_per_block_lambda_list(self, rng):
        obs, _ = make_observations(8, 8, 64, seed=9, noise=0.2)
        p = Partition(8, 8, 4, 4)
        est = fit_bladmc(obs, part=p, lam=[0.1, 0.2, 0.3, 0.4])
        assert est.meta["block_lambdas"] == [0.1, 0.2, 0.3, 0.4]
        with pytest.raises(ValueError):
            fit_bladmc(obs, part=p, lam=[0.1, 0.2])

    def test_empty_block_warns_and_zeros(self):
        obs = ObservationSet(4, 4, [0, 0, 1], [0, 1, 0], [1.0, 2.0, 3.0])
        p = Partition(4, 4, 2, 2)
        with pytest.warns(RuntimeWarning, match="no observations"):
            est = fit_bladmc(obs, part=p, lam=0.0)
        np.testing.assert_array_equal(est.values[2:, 2:], np.zeros((2, 2)))

    def test_imbalanced_block_warns(self):
        rows = np.zeros(50, dtype=int)
        cols = np.zeros(50, dtype=int)
        obs = ObservationSet(4, 4, np.concatenate([rows, [2, 2, 3, 3]]),
                             np.concatenate([cols, [2, 3, 2, 3]]),
                             np.ones(54))
        p = Partition(4, 4, 2, 2)
        with pytest.warns(RuntimeWarning):
            fit_bladmc(obs, part=p, lam=0.0)

    def test_worker_count_bitwise_identical(self, rng):
        obs, _ = make_observations(10, 10, 120, seed=11, noise=0.5)
        p = Partition(10, 10, 5, 5)
        a = fit_bladmc(obs, part=p, lam=0.05, n_workers=1)
        b = fit_bladmc(obs, part=p, lam=0.05, n_workers=4)
        np.testing.assert_array_equal(a.values, b.values)

    def test_requires_partition(self, rng):
        obs, _ = make_observations(4, 4, 8, seed=1)
        with pytest.raises(ValueError):
            fit_bladmc(obs)

    def test_warm_starts_and_states(self, rng):
        obs, _ = make_observations(8, 8, 80, seed=13, noise=0.4)
        p = Partition(8, 8, 4, 4)
        est1, states = fit_bladmc(obs, part=p, lam=0.1, return_states=True)
        assert len(states) == p.n_blocks
        est2 = fit_bladmc(obs, part=p, lam=0.08, initials=states)
        assert est2.converged
        with pytest.raises(ValueError):
            fit_bladmc(obs, part=p, lam=0.1, initials=states[:2])
