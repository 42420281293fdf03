import numpy as np
import pytest

from attrunlearn.cfmodel import (
    EmbeddingTable,
    TrainConfig,
    bpr_loss_grad,
    ce_loss_grad,
    init_embeddings,
    load_embeddings,
    recommend_topk,
    save_embeddings,
    top_k_from_scores,
    train_bpr,
    train_model,
)

from conftest import make_interactions


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def numeric_grad(f, X, h=1e-6):
    g = np.zeros_like(X)
    for idx in np.ndindex(*X.shape):
        old = X[idx]
        X[idx] = old + h
        up = f()
        X[idx] = old - h
        down = f()
        X[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.fixture
def small_table():
    rng = np.random.default_rng(3)
    return EmbeddingTable(rng.normal(size=(4, 3)), rng.normal(size=(6, 3)))


class TestScoring:
    def test_topk_ties_by_ascending_id(self):
        items, _ = top_k_from_scores(np.array([1.0, 2.0, 2.0, 0.5]), 2)
        assert items.tolist() == [1, 2]

    def test_exclusion(self):
        items, _ = top_k_from_scores(np.array([3.0, 2.0, 1.0]), 2, exclude=[0])
        assert items.tolist() == [1, 2]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            top_k_from_scores(np.zeros(3), 3, exclude=[0])

    def test_recommend_out_of_range_user(self, small_table):
        with pytest.raises(IndexError):
            recommend_topk(small_table, 9, 2)


class TestGradients:
    def test_bpr_at_zero_margin(self):
        table = EmbeddingTable(np.zeros((1, 2)), np.zeros((2, 2)))
        loss, gU, gV = bpr_loss_grad(table, [0], [0], [1])
        assert loss == pytest.approx(np.log(2))
        # d(-log sig(x))/dx at 0 is -0.5; x is linear in e_v with coefficient e_u = 0
        assert np.all(gU == 0)

    def test_bpr_matches_finite_differences(self, small_table):
        users, pos, neg = np.array([0, 1, 1, 3]), np.array([0, 2, 2, 5]), np.array([1, 3, 4, 0])
        _, gU, gV = bpr_loss_grad(small_table, users, pos, neg, 0.01)
        f = lambda: bpr_loss_grad(small_table, users, pos, neg, 0.01)[0]
        assert rel_err(gU, numeric_grad(f, small_table.user_emb)) < 1e-4
        assert rel_err(gV, numeric_grad(f, small_table.item_emb)) < 1e-4

    def test_ce_matches_finite_differences(self, small_table):
        users, items, labels = np.array([0, 0, 2, 3]), np.array([1, 4, 4, 2]), np.array([1, 0, 1, 0])
        _, gU, gV = ce_loss_grad(small_table, users, items, labels, 0.02)
        f = lambda: ce_loss_grad(small_table, users, items, labels, 0.02)[0]
        assert rel_err(gU, numeric_grad(f, small_table.user_emb)) < 1e-4
        assert rel_err(gV, numeric_grad(f, small_table.item_emb)) < 1e-4


class TestTraining:
    @pytest.fixture
    def train(self):
        rng = np.random.default_rng(0)
        pairs = {(u, int(i)) for u in range(20) for i in rng.choice(30, 8, replace=False)}
        return make_interactions(sorted(pairs), 20, 30)

    def test_deterministic(self, train):
        cfg = TrainConfig(epochs=3, batch_size=32)
        a, _ = train_model(train, cfg)
        b, _ = train_model(train, cfg)
        np.testing.assert_array_equal(a.user_emb, b.user_emb)

    def test_bpr_loss_decreases(self, train):
        _, hist = train_model(train, TrainConfig(epochs=15, batch_size=32, learning_rate=5.0))
        assert hist[-1]["loss"] < hist[0]["loss"]

    def test_ce_trains(self, train):
        _, hist = train_model(train, TrainConfig(epochs=5, batch_size=32, loss="ce", neg_per_pos=2, learning_rate=5.0))
        assert hist[-1]["loss"] < hist[0]["loss"]

    def test_wrong_loss_for_trainer(self, train):
        with pytest.raises(ValueError):
            train_bpr(init_embeddings(20, 30, 4), train, TrainConfig(loss="ce"))


class TestPersistence:
    def test_round_trip_and_header(self, small_table, tmp_path):
        p = tmp_path / "x.emb"
        save_embeddings(p, small_table, {"note": "x"})
        raw = p.read_bytes()
        assert raw[:4] == b"EMB1"
        assert np.frombuffer(raw[4:16], "<u4").tolist() == [4, 6, 3]
        back = load_embeddings(p)
        np.testing.assert_array_equal(back.user_emb, small_table.as_float32().user_emb)

    def test_truncated_file(self, small_table, tmp_path):
        p = tmp_path / "x.emb"
        save_embeddings(p, small_table)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(ValueError, match="expected"):
            load_embeddings(p)
