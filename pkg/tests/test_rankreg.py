import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrunlearn.cfmodel import EmbeddingTable, recommend_topk
from attrunlearn.rankreg import (
    RankRegularizer,
    RegConfig,
    TopKSnapshot,
    adaptive_weight,
    cosine_similarity,
    l2_reg_grad,
    l2_reg_loss,
    perturbation_study,
    rank_reg_grad,
    rank_reg_loss,
    rbo,
    snapshot,
)

from conftest import make_interactions
from test_cfmodel import numeric_grad, rel_err


class TestSnapshot:
    def test_order_and_negatives(self):
        table = EmbeddingTable(np.ones((1, 1)), np.array([[5.0], [4.0], [3.0], [2.0], [1.0]]))
        snap = snapshot(table, None, k=2, seed=0)
        assert snap.top[0].tolist() == [0, 1]
        assert set(snap.neg[0].tolist()) <= {2, 3, 4}
        assert len(set(snap.neg[0].tolist())) == 2

    def test_matches_recommend_topk_and_excludes_train(self):
        rng = np.random.default_rng(0)
        table = EmbeddingTable(rng.normal(size=(3, 4)), rng.normal(size=(30, 4)))
        train = make_interactions([(0, 1), (0, 2), (1, 5), (2, 7)], 3, 30)
        snap = snapshot(table, train, k=5, seed=1)
        excl = train.user_items()
        for u in range(3):
            assert snap.top[u].tolist() == [i for i, _ in recommend_topk(table, u, 5, excl[u])]
            assert not set(snap.neg[u]) & (set(snap.top[u]) | set(excl[u].tolist()))

    def test_seeded(self):
        rng = np.random.default_rng(0)
        table = EmbeddingTable(rng.normal(size=(3, 4)), rng.normal(size=(30, 4)))
        a, b = snapshot(table, None, 4, seed=9), snapshot(table, None, 4, seed=9)
        np.testing.assert_array_equal(a.neg, b.neg)

    def test_insufficient_candidates(self):
        table = EmbeddingTable(np.ones((1, 2)), np.ones((5, 2)))
        with pytest.raises(ValueError, match="candidate"):
            snapshot(table, None, k=3)

    def test_text_dump(self, tmp_path):
        snap = TopKSnapshot(np.array([[1, 2]]), np.array([[3, 4]]), np.zeros((5, 2)))
        snap.write_text(tmp_path / "s.txt")
        assert (tmp_path / "s.txt").read_text() == "0: [1, 2] | [3, 4]\n"


class TestWeights:
    def test_orthogonal_gives_half(self):
        assert adaptive_weight(np.array([1.0, 0]), np.array([0, 1.0]), 1e3) == 0.5

    def test_identical_unit_vectors(self):
        e = np.array([0.6, 0.8])
        assert adaptive_weight(e, e, 1e3) == pytest.approx(1 - 1 / (1 + np.exp(-1e-3)), abs=1e-12)

    def test_zero_vector_cosine(self):
        assert cosine_similarity(np.zeros(3), np.ones(3)) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1))
    def test_decreasing_in_similarity(self, a, b):
        if a == b:
            return
        lo, hi = sorted((a, b))
        w = lambda c: adaptive_weight(np.array([1.0, 0.0]), np.array([c, np.sqrt(max(0.0, 1 - c * c))]), 0.5)
        assert 0 < w(hi) <= w(lo) < 1


class TestRankLoss:
    def test_hand_computed_single_user(self):
        # top = [v1, v2] with s(v1) = 1.0, s(v2) = 1.2; negatives score very low
        V = np.array([[1.0, 0.0], [1.2, 0.0], [-100.0, 0.0], [-100.0, 0.0]])
        table = EmbeddingTable(np.array([[1.0, 0.0]]), V)
        snap = TopKSnapshot(np.array([[0, 1]]), np.array([[2, 3]]), V)
        rr = RankRegularizer(snap, RegConfig(k=2, margin=0.05, tau=1e3))
        w = rr.offset[0, 0] / 0.05
        assert rr.loss(table) == pytest.approx(1.2 - 1.0 + w * 0.05)

    def test_inactive_when_gaps_exceed_margin(self):
        V = np.array([[3.0], [2.0], [1.0], [0.0]])
        table = EmbeddingTable(np.ones((1, 1)), V)
        snap = TopKSnapshot(np.array([[0, 1]]), np.array([[2, 3]]), V)
        assert rank_reg_loss(table, snap, RegConfig(k=2)) == 0.0
        gU, gV = rank_reg_grad(table, snap, RegConfig(k=2))
        assert np.all(gU == 0) and np.all(gV == 0)

    def test_at_snapshot_terms_bounded_by_margin(self):
        rng = np.random.default_rng(0)
        table = EmbeddingTable(rng.normal(size=(10, 4)), rng.normal(size=(50, 4)))
        snap = snapshot(table, None, 5)
        rr = RankRegularizer(snap, RegConfig(k=5))
        h = np.maximum(rr.hinge_args(table), 0)
        assert h.max() <= 0.05

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        table = EmbeddingTable(rng.normal(size=(4, 3)), rng.normal(size=(12, 3)))
        snap = snapshot(table, None, 3, seed=0)
        # move away from the snapshot so many hinges are active, none at a kink
        table.user_emb += rng.normal(size=table.user_emb.shape)
        cfg = RegConfig(k=3, margin=0.5)
        rr = RankRegularizer(snap, cfg)
        assert np.abs(rr.hinge_args(table)).min() > 1e-4
        _, gU, gV = rr.loss_grad(table)
        assert rel_err(gU, numeric_grad(lambda: rr.loss(table), table.user_emb)) < 1e-4
        assert rel_err(gV, numeric_grad(lambda: rr.loss(table), table.item_emb)) < 1e-4

    def test_untouched_users_zero_rows(self):
        V = np.array([[3.0], [2.0], [1.0], [0.0]])
        table = EmbeddingTable(np.array([[1.0], [-1.0]]), V)
        snap = TopKSnapshot(np.array([[0, 1], [0, 1]]), np.array([[2, 3], [2, 3]]), V)
        _, gU, _ = RankRegularizer(snap, RegConfig(k=2)).loss_grad(table)
        assert np.all(gU[0] == 0) and np.any(gU[1] != 0)

    def test_dimension_mismatch(self):
        V = np.zeros((4, 2))
        snap = TopKSnapshot(np.array([[0, 1]]), np.array([[2, 3]]), V)
        with pytest.raises(ValueError):
            RankRegularizer(snap, RegConfig(k=2)).loss(EmbeddingTable(np.zeros((2, 2)), V))


class TestL2:
    def test_values(self):
        a = np.zeros((2, 2))
        assert l2_reg_loss(a, a) == 0.0
        assert l2_reg_loss(a + 1, a) == 4.0
        np.testing.assert_array_equal(l2_reg_grad(a + 1, a), 2 * np.ones((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l2_reg_loss(np.zeros((2, 2)), np.zeros((3, 2)))


class TestRbo:
    def test_identity_and_disjoint(self):
        assert rbo([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)
        assert rbo([1, 2, 3], [4, 5, 6]) == 0.0

    def test_hand_value(self):
        # agreements 1/1, 1/2, 3/3 weighted by 1, 0.9, 0.81
        expected = (1 + 0.9 * 0.5 + 0.81 * 1) * 0.1 / (1 - 0.9 ** 3)
        assert rbo([1, 2, 3], [1, 3, 2], 0.9) == pytest.approx(expected)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rbo([1, 2], [1])

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(list(range(12))), st.permutations(list(range(12))), st.integers(1, 12),
           st.floats(0.05, 0.95))
    def test_bounded(self, a, b, L, p):
        assert 0.0 <= rbo(a[:L], b[:L], p) <= 1.0


class TestPerturbation:
    def test_zero_budget_is_degenerate(self):
        rng = np.random.default_rng(0)
        table = EmbeddingTable(rng.normal(size=(6, 3)), rng.normal(size=(40, 3)))
        rows = np.array(perturbation_study(table, None, trials=3, budget=0.0, k=5))
        assert np.all(rows[:, 0] == 0) and np.all(rows[:, 2] == 1.0)
        assert np.ptp(rows[:, 1]) == 0

    def test_rows_respect_budget(self):
        rng = np.random.default_rng(1)
        table = EmbeddingTable(rng.normal(size=(6, 3)), rng.normal(size=(40, 3)))
        rows = np.array(perturbation_study(table, None, trials=5, budget=0.5, k=5))
        assert rows.shape == (5, 3)
        assert np.all(rows[:, 0] <= 6 * 0.25 + 1e-12)
