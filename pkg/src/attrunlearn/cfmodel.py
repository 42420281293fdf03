"""Embedding-table matrix factorization trained with BPR or binary cross-entropy.

Scores are plain dot products ``<e_u, e_v>``. Training is mini-batch SGD on
the mean batch loss with uniformly sampled negatives, resampled every epoch.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .dataset import InteractionSet
from .seeding import rng_for

log = logging.getLogger(__name__)

MAGIC = b"EMB1"


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


@dataclass
class EmbeddingTable:
    user_emb: np.ndarray  # M x d
    item_emb: np.ndarray  # N x d

    def __post_init__(self):
        self.user_emb = np.asarray(self.user_emb, dtype=np.float64)
        self.item_emb = np.asarray(self.item_emb, dtype=np.float64)
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2:
            raise ValueError("embedding matrices must be 2-D")
        if self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError(f"dimension mismatch: users d={self.user_emb.shape[1]}, items d={self.item_emb.shape[1]}")
        if self.user_emb.shape[1] < 1:
            raise ValueError("embedding dimension must be >= 1")

    @property
    def M(self) -> int:
        return self.user_emb.shape[0]

    @property
    def N(self) -> int:
        return self.item_emb.shape[0]

    @property
    def d(self) -> int:
        return self.user_emb.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_emb.copy(), self.item_emb.copy())

    def as_float32(self) -> "EmbeddingTable":
        """The table as it survives a round trip through the EMB1 format."""
        return EmbeddingTable(
            self.user_emb.astype(np.float32).astype(np.float64),
            self.item_emb.astype(np.float32).astype(np.float64),
        )

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.user_emb).all() and np.isfinite(self.item_emb).all())


@dataclass
class TrainConfig:
    # lr applies to the gradient of the *mean* batch loss, hence the large value
    learning_rate: float = 50.0
    epochs: int = 30
    batch_size: int = 1024
    neg_per_pos: int = 1
    seed: int = 0
    loss: str = "bpr"
    weight_decay: float = 3e-5
    dim: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("bpr", "ce"):
            raise ValueError(f"loss must be 'bpr' or 'ce', got {self.loss!r}")
        if self.neg_per_pos < 1:
            raise ValueError("neg_per_pos must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def init_embeddings(M: int, N: int, d: int, seed: int = 0, std: float = 0.01) -> EmbeddingTable:
    """I.i.d. Normal(0, std^2) user and item tables."""
    if M < 1 or N < 1 or d < 1:
        raise ValueError(f"M, N, d must all be >= 1 (got {M}, {N}, {d})")
    rng = rng_for(seed, "init")
    return EmbeddingTable(rng.normal(0.0, std, (M, d)), rng.normal(0.0, std, (N, d)))


def _check_user(table: EmbeddingTable, u: int) -> None:
    if not 0 <= u < table.M:
        raise IndexError(f"user id {u} out of range [0, {table.M})")


def score(table: EmbeddingTable, u: int, v: int) -> float:
    _check_user(table, u)
    if not 0 <= v < table.N:
        raise IndexError(f"item id {v} out of range [0, {table.N})")
    return float(table.user_emb[u] @ table.item_emb[v])


def score_matrix(table: EmbeddingTable, users: Optional[np.ndarray] = None) -> np.ndarray:
    U = table.user_emb if users is None else table.user_emb[users]
    return U @ table.item_emb.T


def top_k_from_scores(scores: np.ndarray, k: int, exclude: Sequence[int] = ()) -> Tuple[np.ndarray, np.ndarray]:
    """Top-k over one score row; descending score, ties by ascending item id."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(scores.shape[0], dtype=bool)
    exclude = np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude, dtype=np.int64)
    mask[exclude] = False
    cand = np.flatnonzero(mask)
    if k > cand.size:
        raise ValueError(f"k={k} exceeds the {cand.size} candidate items")
    order = np.lexsort((cand, -scores[cand]))[:k]
    items = cand[order]
    return items, scores[items]


def recommend_topk(table: EmbeddingTable, u: int, k: int, exclude: Sequence[int] = ()) -> List[Tuple[int, float]]:
    """Top-k ``(item, score)`` pairs for user ``u`` over items not in ``exclude``."""
    _check_user(table, u)
    items, scores = top_k_from_scores(table.item_emb @ table.user_emb[u], k, exclude)
    return [(int(i), float(s)) for i, s in zip(items, scores)]


# -- losses ------------------------------------------------------------------

def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    return np.exp(log_sigmoid(x))


def bpr_loss_grad(table: EmbeddingTable, users, pos, neg, weight_decay: float = 0.0):
    """Mean BPR loss over the triples and its gradient.

    Returns ``(loss, grad_user, grad_item)`` with full-size gradient matrices.
    The L2 term ``weight_decay/2 * (||U||^2 + ||V||^2)`` is included when
    ``weight_decay`` > 0.
    """
    U, V = table.user_emb, table.item_emb
    eu, ei, ej = U[users], V[pos], V[neg]
    x = np.einsum("bd,bd->b", eu, ei - ej)
    n = len(users)
    loss = -log_sigmoid(x).mean()
    coef = (-sigmoid(-x) / n)[:, None]  # d(-log sig(x))/dx = -sig(-x)
    gU = np.zeros_like(U)
    gV = np.zeros_like(V)
    np.add.at(gU, users, coef * (ei - ej))
    np.add.at(gV, pos, coef * eu)
    np.add.at(gV, neg, -coef * eu)
    if weight_decay:
        loss += 0.5 * weight_decay * (np.sum(U * U) + np.sum(V * V))
        gU += weight_decay * U
        gV += weight_decay * V
    return float(loss), gU, gV


def ce_loss_grad(table: EmbeddingTable, users, items, labels, weight_decay: float = 0.0):
    """Mean binary cross-entropy of ``sigmoid(score)`` against 0/1 labels."""
    U, V = table.user_emb, table.item_emb
    labels = np.asarray(labels, dtype=np.float64)
    eu, ev = U[users], V[items]
    s = np.einsum("bd,bd->b", eu, ev)
    n = len(users)
    loss = -(labels * log_sigmoid(s) + (1.0 - labels) * log_sigmoid(-s)).mean()
    coef = ((sigmoid(s) - labels) / n)[:, None]
    gU = np.zeros_like(U)
    gV = np.zeros_like(V)
    np.add.at(gU, users, coef * ev)
    np.add.at(gV, items, coef * eu)
    if weight_decay:
        loss += 0.5 * weight_decay * (np.sum(U * U) + np.sum(V * V))
        gU += weight_decay * U
        gV += weight_decay * V
    return float(loss), gU, gV


# -- training ----------------------------------------------------------------

class NegativeSampler:
    """Uniform sampling of items a user has not interacted with in ``train``."""

    def __init__(self, train: InteractionSet):
        self.n_items = train.n_items
        self.seen = np.zeros((train.n_users, train.n_items), dtype=bool)
        self.seen[train.users, train.items] = True
        full = self.seen.all(axis=1)
        if full.any():
            raise ValueError(f"{int(full.sum())} users interacted with every item; no negatives available")

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        neg = rng.integers(0, self.n_items, size=len(users))
        bad = self.seen[users, neg]
        while bad.any():
            neg[bad] = rng.integers(0, self.n_items, size=int(bad.sum()))
            bad = self.seen[users, neg]
        return neg


class AuxLoss(Protocol):
    """Extra user-embedding loss added to every training batch."""

    def begin_epoch(self, table: EmbeddingTable, epoch: int) -> None: ...

    def loss_grad(self, table: EmbeddingTable) -> Tuple[float, np.ndarray]: ...


def _train(table: EmbeddingTable, train: InteractionSet, cfg: TrainConfig, aux: Optional[AuxLoss] = None):
    if table.M != train.n_users or table.N != train.n_items:
        raise ValueError(f"table is {table.M}x{table.N} but data has {train.n_users} users, {train.n_items} items")
    table = table.copy()
    sampler = NegativeSampler(train)
    rng = rng_for(cfg.seed, "train", cfg.loss)
    n = len(train)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        if cfg.loss == "bpr":
            negs = sampler.sample(train.users, rng)
        else:
            rep_users = np.repeat(train.users, cfg.neg_per_pos)
            negs = sampler.sample(rep_users, rng).reshape(n, cfg.neg_per_pos)
        total = 0.0
        aux_total = 0.0
        n_batches = 0
        if aux is not None:
            aux.begin_epoch(table, epoch)
        for start in range(0, n, cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            if cfg.loss == "bpr":
                loss, gU, gV = bpr_loss_grad(table, train.users[b], train.items[b], negs[b], cfg.weight_decay)
            else:
                u = train.users[b]
                users = np.concatenate([u, np.repeat(u, cfg.neg_per_pos)])
                items = np.concatenate([train.items[b], negs[b].ravel()])
                labels = np.concatenate([np.ones(len(b)), np.zeros(len(b) * cfg.neg_per_pos)])
                loss, gU, gV = ce_loss_grad(table, users, items, labels, cfg.weight_decay)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite {cfg.loss} loss at epoch {epoch}, batch offset {start}; "
                    f"max |U|={np.abs(table.user_emb).max():.3g}, max |V|={np.abs(table.item_emb).max():.3g}"
                )
            if aux is not None:
                aux_loss, aux_gU = aux.loss_grad(table)
                if not np.isfinite(aux_loss):
                    raise TrainingDivergedError(f"non-finite auxiliary loss at epoch {epoch}")
                gU = gU + aux_gU
                aux_total += aux_loss
            n_batches += 1
            table.user_emb -= cfg.learning_rate * gU
            table.item_emb -= cfg.learning_rate * gV
            total += loss * len(b)
        record = {"epoch": epoch, "loss": total / n}
        if aux is not None:
            record["aux"] = aux_total / n_batches
        if not table.is_finite():
            raise TrainingDivergedError(f"non-finite embeddings after epoch {epoch}")
        history.append(record)
        log.debug("epoch %d loss %.5f", epoch, record["loss"])
    return table, history


def train_bpr(table: EmbeddingTable, train: InteractionSet, cfg: TrainConfig, aux: Optional[AuxLoss] = None):
    """Returns ``(trained_table, history)``; history holds the mean epoch loss."""
    if cfg.loss != "bpr":
        raise ValueError("train_bpr requires cfg.loss == 'bpr'")
    return _train(table, train, cfg, aux)


def train_ce(table: EmbeddingTable, train: InteractionSet, cfg: TrainConfig, aux: Optional[AuxLoss] = None):
    if cfg.loss != "ce":
        raise ValueError("train_ce requires cfg.loss == 'ce'")
    return _train(table, train, cfg, aux)


def train_model(train: InteractionSet, cfg: TrainConfig, aux: Optional[AuxLoss] = None):
    """Fresh init with ``cfg.seed`` followed by BPR or CE training."""
    table = init_embeddings(train.n_users, train.n_items, cfg.dim, cfg.seed)
    fit = train_bpr if cfg.loss == "bpr" else train_ce
    return fit(table, train, cfg, aux)


# -- persistence -------------------------------------------------------------

def save_embeddings(path, table: EmbeddingTable, meta: Optional[dict] = None) -> None:
    """Write the EMB1 binary format plus a ``<file>.meta.json`` sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", table.M, table.N, table.d))
        fh.write(np.ascontiguousarray(table.user_emb, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(table.item_emb, dtype="<f4").tobytes())
    if meta is not None:
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def load_embeddings(path) -> EmbeddingTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"embedding file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an EMB1 file")
    M, N, d = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * d * (M + N)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {M}x{N}x{d}, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", offset=16)
    U = body[: M * d].reshape(M, d).astype(np.float64)
    V = body[M * d:].reshape(N, d).astype(np.float64)
    return EmbeddingTable(U, V)


def load_meta(path) -> dict:
    with open(str(path) + ".meta.json") as fh:
        return json.load(fh)


def config_dict(cfg) -> dict:
    return asdict(cfg)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
