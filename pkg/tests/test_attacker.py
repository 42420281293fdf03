import json

import numpy as np
import pytest

from attrunlearn.attacker import (
    AttackerConfig,
    MlpModel,
    evaluate_attack,
    kfold_splits,
    parse_arch,
    train_attacker,
)
from attrunlearn.metrics import balanced_accuracy

from test_cfmodel import rel_err


class TestArch:
    @pytest.mark.parametrize("text,dims", [("100", (100,)), ("100,64", (100, 64)), ("", ()), ((100, 64, 32), (100, 64, 32))])
    def test_parse(self, text, dims):
        assert parse_arch(text) == dims

    @pytest.mark.parametrize("text", ["a", "100,,3", "0", "-5"])
    def test_bad(self, text):
        with pytest.raises(ValueError):
            parse_arch(text)


class TestFolds:
    def test_partition(self):
        folds = kfold_splits(np.arange(10), 5, seed=0)
        tests = [t for _, t in folds]
        assert all(len(t) == 2 for t in tests)
        assert sorted(np.concatenate(tests).tolist()) == list(range(10))
        for tr, te in folds:
            assert not set(tr) & set(te) and len(tr) == 8

    def test_seeded(self):
        a = kfold_splits(np.arange(30), 5, seed=4)
        b = kfold_splits(np.arange(30), 5, seed=4)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    def test_stratified_proportions(self):
        labels = np.r_[np.zeros(67, int), np.ones(27, int), np.full(9, 2)]
        for _, te in kfold_splits(np.arange(len(labels)), 5, seed=1, labels=labels):
            for c, n in zip(range(3), (67, 27, 9)):
                assert abs(np.sum(labels[te] == c) - n / 5) <= 1

    def test_errors(self):
        with pytest.raises(ValueError):
            kfold_splits(np.arange(10), 1)
        with pytest.raises(ValueError):
            kfold_splits(np.arange(3), 5)


class TestMlp:
    @pytest.mark.parametrize("hidden", [(), (6,), (5, 4)])
    def test_gradient_matches_finite_differences(self, hidden):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(5, 3)), np.array([0, 1, 2, 1, 0])
        sw = rng.uniform(0.5, 2, 5)
        model = MlpModel((3,) + hidden + (3,), seed=1)
        _, grads = model.loss_grad(X, y, l2=1.0, sample_weight=sw)
        h = 1e-6
        for p, g in zip(model.params(), grads):
            num = np.zeros_like(p)
            for idx in np.ndindex(*p.shape):
                old = p[idx]
                p[idx] = old + h
                up = model.loss_grad(X, y, 1.0, sw)[0]
                p[idx] = old - h
                down = model.loss_grad(X, y, 1.0, sw)[0]
                p[idx] = old
                num[idx] = (up - down) / (2 * h)
            assert rel_err(g, num) < 1e-4

    def test_separable_clusters(self):
        rng = np.random.default_rng(0)
        X = np.r_[rng.normal(size=(40, 4)) + 5, rng.normal(size=(40, 4)) - 5]
        y = np.r_[np.zeros(40, int), np.ones(40, int)]
        model = train_attacker(X, y, seed=0)
        assert np.mean(model.predict(X) == y) == 1.0

    def test_softmax_regression_trains(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(400, 3))
        y = (X[:, 0] > 0).astype(int)
        model = train_attacker(X, y, arch="", seed=0)
        assert len(model.weights) == 1
        assert np.mean(model.predict(X) == y) > 0.8

    def test_missing_class(self):
        with pytest.raises(ValueError, match="absent"):
            train_attacker(np.zeros((4, 2)), np.array([0, 0, 2, 2]), n_classes=3)


class TestEvaluate:
    def test_leaked_labels_are_perfect(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 3, 150)
        X = np.c_[10.0 * np.eye(3)[y], rng.normal(size=(150, 2))]
        rep = evaluate_attack(X, y, seed=0)
        assert rep.f1_mean == 1.0 and rep.bacc_mean == 1.0

    @pytest.mark.parametrize("T", [2, 3])
    def test_null_signal(self, T):
        rng = np.random.default_rng(T)
        X = rng.normal(size=(500, 8))
        y = rng.integers(0, T, 500)
        assert evaluate_attack(X, y, seed=0).bacc_mean == pytest.approx(1 / T, abs=0.1)

    def test_untrained_embeddings_near_chance(self):
        rng = np.random.default_rng(7)
        X = rng.normal(0, 0.01, size=(600, 16))
        y = rng.integers(0, 2, 600)
        assert evaluate_attack(X, y, seed=1).bacc_mean == pytest.approx(0.5, abs=0.05)

    def test_report_json(self):
        rng = np.random.default_rng(0)
        rep = evaluate_attack(rng.normal(size=(50, 3)), np.arange(50) % 2, attribute="gender",
                              cfg=AttackerConfig(max_epochs=5))
        d = json.loads(rep.to_json())
        assert d["attribute"] == "gender" and d["folds"] == 5 and len(d["per_fold"]) == 5
        assert 0 <= d["f1_mean"] <= 1 and 0 <= d["bacc_mean"] <= 1

    def test_repeats_pool_folds(self):
        rng = np.random.default_rng(0)
        rep = evaluate_attack(rng.normal(size=(50, 3)), np.arange(50) % 2, repeats=2, cfg=AttackerConfig(max_epochs=3))
        assert len(rep.bacc_per_fold) == 10

    def test_agrees_with_reference_library(self):
        # same hidden width, L2 and class weighting; scores should land close together
        sk = pytest.importorskip("sklearn.neural_network")
        from sklearn.utils.class_weight import compute_sample_weight

        rng = np.random.default_rng(0)
        n = 600
        y = (rng.random(n) < 0.3).astype(int)
        X = rng.normal(size=(n, 8))
        X[:, 0] += 0.9 * y
        ours, theirs = [], []
        for f, (tr, te) in enumerate(kfold_splits(np.arange(n), 5, seed=0, labels=y)):
            model = train_attacker(X[tr], y[tr], seed=f, cfg=AttackerConfig(optimizer="adam"))
            ours.append(balanced_accuracy(y[te], model.predict(X[te])))
            ref = sk.MLPClassifier((100,), alpha=1.0, max_iter=500, random_state=f, batch_size=64)
            ref.fit(X[tr], y[tr], sample_weight=compute_sample_weight("balanced", y[tr]))
            theirs.append(balanced_accuracy(y[te], ref.predict(X[te])))
        assert np.mean(ours) == pytest.approx(np.mean(theirs), abs=0.04)
