"""Attribute-inference attacker: an MLP over user embeddings, scored with k-fold CV."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .metrics import balanced_accuracy, micro_f1
from .optim import Adam, SGD
from .seeding import rng_for, sub_seed


def parse_arch(spec) -> Tuple[int, ...]:
    """Hidden layer widths from ``"100"``, ``"100,64"`` or ``""`` (softmax regression).

    The output layer is implied by the class count and is not listed.
    """
    if isinstance(spec, (list, tuple)):
        dims = tuple(int(x) for x in spec)
    else:
        text = str(spec).strip()
        if not text:
            return ()
        try:
            dims = tuple(int(x) for x in text.split(","))
        except ValueError:
            raise ValueError(f"bad architecture {spec!r}: expected comma-separated widths like '100,64'") from None
    if any(h < 1 for h in dims):
        raise ValueError(f"bad architecture {spec!r}: widths must be positive")
    return dims


@dataclass
class AttackerConfig:
    hidden: Tuple[int, ...] = (100,)
    learning_rate: float = 1e-3
    l2: float = 1.0
    max_epochs: int = 500
    batch_size: int = 64
    tol: float = 1e-5
    patience: int = 10
    optimizer: str = "sgd"
    class_balanced: bool = True

    def __post_init__(self):
        self.hidden = parse_arch(self.hidden)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class MlpModel:
    """Rectifier hidden layers and a softmax output."""

    def __init__(self, dims: Sequence[int], seed: int = 0):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        self.dims = tuple(int(d) for d in dims)
        rng = rng_for(seed, "mlp-init")
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, fan_out))

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    def params(self) -> List[np.ndarray]:
        return self.weights + self.biases

    def _forward(self, X: np.ndarray):
        acts = [X]
        h = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
            acts.append(h)
        z = h @ self.weights[-1] + self.biases[-1]
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return acts, p

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self._forward(np.asarray(X, dtype=np.float64))[1]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def loss_grad(self, X: np.ndarray, y: np.ndarray, l2: float = 0.0, sample_weight: Optional[np.ndarray] = None):
        """Weighted mean cross-entropy plus ``0.5 * l2 * sum ||W||^2 / n``.

        Returns ``(loss, grads)`` with grads ordered like :meth:`params`.
        """
        n = X.shape[0]
        sw = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        acts, p = self._forward(X)
        nll = -np.log(np.clip(p[np.arange(n), y], 1e-300, None))
        loss = float((sw * nll).sum() / n)
        loss += 0.5 * l2 * sum(float((W * W).sum()) for W in self.weights) / n
        delta = p.copy()
        delta[np.arange(n), y] -= 1.0
        delta *= sw[:, None] / n
        gW = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            gW[layer] = acts[layer].T @ delta + l2 * self.weights[layer] / n
            gb[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (acts[layer] > 0)
        return loss, gW + gb


def _balanced_weights(y: np.ndarray, T: int) -> np.ndarray:
    counts = np.bincount(y, minlength=T).astype(np.float64)
    return (len(y) / (T * counts))[y]


def train_attacker(embeddings: np.ndarray, labels: np.ndarray, arch=(100,), seed: int = 0,
                   cfg: Optional[AttackerConfig] = None, n_classes: Optional[int] = None) -> MlpModel:
    """Fit an MLP on embeddings with early stopping on the epoch training loss.

    Raises:
        ValueError: if any class in ``range(n_classes)`` has no training sample.
    """
    cfg = cfg or AttackerConfig(hidden=parse_arch(arch))
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    T = int(n_classes if n_classes is not None else y.max() + 1)
    missing = np.flatnonzero(np.bincount(y, minlength=T) == 0)
    if len(missing):
        raise ValueError(f"class(es) {missing.tolist()} absent from the attacker's training labels")
    if len(y) < T:
        raise ValueError("need at least one sample per class")
    model = MlpModel((X.shape[1],) + tuple(cfg.hidden) + (T,), seed)
    sw = _balanced_weights(y, T) if cfg.class_balanced else np.ones(len(y))
    opt = (Adam if cfg.optimizer == "adam" else SGD)(model.params(), cfg.learning_rate)
    rng = rng_for(seed, "mlp-batches")
    best = np.inf
    stale = 0
    for _ in range(cfg.max_epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads = model.loss_grad(X[b], y[b], cfg.l2, sw[b])
            opt.step(grads)
            total += loss * len(b)
        epoch_loss = total / len(y)
        if epoch_loss > best - cfg.tol:
            stale += 1
            if stale >= cfg.patience:
                break
        else:
            stale = 0
        best = min(best, epoch_loss)
    return model


def kfold_splits(user_ids, folds: int = 5, seed: int = 0, labels=None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Deterministic shuffled k-fold partition, stratified by ``labels`` when given.

    Members of each class are shuffled and dealt round-robin into folds, with
    each class continuing where the previous one stopped so fold sizes stay
    within one of each other.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    ids = np.asarray(user_ids)
    if len(ids) < folds:
        raise ValueError(f"need at least {folds} users, got {len(ids)}")
    rng = rng_for(seed, "kfold")
    if labels is None:
        strata = [np.arange(len(ids))]
    else:
        labels = np.asarray(labels)
        strata = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    assign = np.empty(len(ids), dtype=np.int64)
    offset = 0
    for members in strata:
        perm = rng.permutation(members)
        assign[perm] = (offset + np.arange(len(perm))) % folds
        offset += len(perm)
    return [(ids[assign != f], ids[assign == f]) for f in range(folds)]


@dataclass
class AttackReport:
    attribute: str
    folds: int
    seed: int
    f1_per_fold: List[float] = field(default_factory=list)
    bacc_per_fold: List[float] = field(default_factory=list)

    @property
    def f1_mean(self) -> float:
        return float(np.mean(self.f1_per_fold))

    @property
    def bacc_mean(self) -> float:
        return float(np.mean(self.bacc_per_fold))

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "folds": self.folds,
            "seed": self.seed,
            "f1_mean": self.f1_mean,
            "bacc_mean": self.bacc_mean,
            "per_fold": [{"f1": f, "bacc": b} for f, b in zip(self.f1_per_fold, self.bacc_per_fold)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_attack(embeddings, labels, arch=(100,), folds: int = 5, seed: int = 0, attribute: str = "",
                    cfg: Optional[AttackerConfig] = None, repeats: int = 1) -> AttackReport:
    """Train on each fold's complement, predict the held-out users, average the scores.

    ``embeddings`` may be an ``EmbeddingTable`` (user rows are attacked) or a
    matrix. With ``repeats > 1`` the whole k-fold pass is redone with fresh
    fold assignments and all fold scores are pooled.
    """
    X = np.asarray(getattr(embeddings, "user_emb", embeddings), dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) != X.shape[0]:
        raise ValueError(f"{len(y)} labels for {X.shape[0]} users")
    T = int(y.max() + 1)
    cfg = cfg or AttackerConfig(hidden=parse_arch(arch))
    report = AttackReport(attribute=attribute, folds=folds, seed=seed)
    for r in range(repeats):
        split_seed = seed if r == 0 else sub_seed(seed, "repeat", r)
        for f, (tr, te) in enumerate(kfold_splits(np.arange(len(y)), folds, split_seed, labels=y)):
            model = train_attacker(X[tr], y[tr], seed=sub_seed(split_seed, "fold", f), cfg=cfg, n_classes=T)
            pred = model.predict(X[te])
            report.f1_per_fold.append(micro_f1(y[te], pred))
            report.bacc_per_fold.append(balanced_accuracy(y[te], pred, T))
    return report
