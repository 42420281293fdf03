"""Recommendation-preserving regularizers and list similarity.

``rank_reg_loss_grad`` is the adaptive-margin pairwise hinge over each user's
pre-unlearning top-k list:

    sum_u [ sum_{j<k} max(0, s(u, v_{j+1}) - s(u, v_j) + w(v_j, v_{j+1}) * margin)
          + sum_{j<=k} max(0, s(u, neg_j) - s(u, v_j) + w(v_j, neg_j) * margin) ]

with ``w(a, b) = 1 - sigmoid(cos(e_a, e_b) / tau)`` computed once from the
snapshot item embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .cfmodel import EmbeddingTable, sigmoid, top_k_from_scores
from .dataset import InteractionSet
from .seeding import rng_for


@dataclass
class RegConfig:
    k: int = 20
    margin: float = 0.05
    tau: float = 1e3

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass
class TopKSnapshot:
    top: np.ndarray  # M x k, descending original score
    neg: np.ndarray  # M x k
    item_emb: np.ndarray  # frozen copy used for the margin weights

    @property
    def k(self) -> int:
        return self.top.shape[1]

    @property
    def M(self) -> int:
        return self.top.shape[0]

    def hinge_pairs(self):
        """``(hi, lo)`` item matrices: each hinge wants s(hi) >= s(lo) + margin."""
        hi = np.concatenate([self.top[:, :-1], self.top], axis=1)
        lo = np.concatenate([self.top[:, 1:], self.neg], axis=1)
        return hi, lo

    def write_text(self, path) -> None:
        with open(path, "w") as fh:
            for u in range(self.M):
                fh.write(f"{u}: {self.top[u].tolist()} | {self.neg[u].tolist()}\n")


def _exclusions(train: Optional[InteractionSet], M: int) -> List[np.ndarray]:
    if train is None:
        return [np.empty(0, dtype=np.int64)] * M
    return train.user_items()


def snapshot(table: EmbeddingTable, train: Optional[InteractionSet], k: int = 20, seed: int = 0) -> TopKSnapshot:
    """Capture each user's top-k (train items excluded) and k fixed negatives.

    Negatives are drawn uniformly without replacement from items in neither
    the user's train set nor the top-k list.
    """
    M, N = table.M, table.N
    excl = _exclusions(train, M)
    rng = rng_for(seed, "snapshot-negatives")
    top = np.empty((M, k), dtype=np.int64)
    neg = np.empty((M, k), dtype=np.int64)
    scores = table.user_emb @ table.item_emb.T
    for u in range(M):
        if N - len(excl[u]) < 2 * k:
            raise ValueError(f"user {u}: only {N - len(excl[u])} candidate items, need {2 * k} for top-k plus negatives")
        top[u], _ = top_k_from_scores(scores[u], k, excl[u])
        allowed = np.ones(N, dtype=bool)
        allowed[excl[u]] = False
        allowed[top[u]] = False
        neg[u] = rng.choice(np.flatnonzero(allowed), k, replace=False)
    return TopKSnapshot(top=top, neg=neg, item_emb=table.item_emb.copy())


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; 0 whenever either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = (a * b).sum(-1)
    denom = na * nb
    return np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)


def adaptive_weight(e_a, e_b, tau: float):
    if not tau > 0:
        raise ValueError("tau must be > 0")
    w = 1.0 - sigmoid(cosine_similarity(e_a, e_b) / tau)
    return float(w) if np.ndim(w) == 0 else w


def margin_weights(snap: TopKSnapshot, tau: float) -> np.ndarray:
    hi, lo = snap.hinge_pairs()
    return adaptive_weight(snap.item_emb[hi], snap.item_emb[lo], tau)


class RankRegularizer:
    """Adaptive-margin hinge loss bound to one snapshot; weights cached."""

    def __init__(self, snap: TopKSnapshot, cfg: RegConfig):
        self.snap = snap
        self.cfg = cfg
        self.hi, self.lo = snap.hinge_pairs()
        self.offset = margin_weights(snap, cfg.tau) * cfg.margin
        self.users = np.broadcast_to(np.arange(snap.M)[:, None], self.hi.shape)

    def _check(self, table: EmbeddingTable) -> None:
        if table.M != self.snap.M or table.N != self.snap.item_emb.shape[0] or table.d != self.snap.item_emb.shape[1]:
            raise ValueError(
                f"snapshot is for {self.snap.M} users x {self.snap.item_emb.shape} items; table is "
                f"{table.M}x{table.N}x{table.d}"
            )

    def hinge_args(self, table: EmbeddingTable) -> np.ndarray:
        self._check(table)
        U, V = table.user_emb, table.item_emb
        return np.einsum("ud,ujd->uj", U, V[self.lo] - V[self.hi]) + self.offset

    def loss(self, table: EmbeddingTable) -> float:
        return float(np.maximum(self.hinge_args(table), 0.0).sum())

    def loss_grad(self, table: EmbeddingTable):
        """Returns ``(loss, grad_user, grad_item)``; subgradient 0 at kinks."""
        h = self.hinge_args(table)
        active = h > 0
        U, V = table.user_emb, table.item_emb
        u, hi, lo = self.users[active], self.hi[active], self.lo[active]
        gU = np.zeros_like(U)
        gV = np.zeros_like(V)
        np.add.at(gU, u, V[lo] - V[hi])
        np.add.at(gV, lo, U[u])
        np.add.at(gV, hi, -U[u])
        return float(h[active].sum()), gU, gV


def rank_reg_loss(table: EmbeddingTable, snap: TopKSnapshot, cfg: RegConfig) -> float:
    return RankRegularizer(snap, cfg).loss(table)


def rank_reg_grad(table: EmbeddingTable, snap: TopKSnapshot, cfg: RegConfig):
    """``(grad_user, grad_item)`` of the hinge loss."""
    _, gU, gV = RankRegularizer(snap, cfg).loss_grad(table)
    return gU, gV


def l2_reg_loss(user_emb: np.ndarray, original_user_emb: np.ndarray) -> float:
    user_emb = getattr(user_emb, "user_emb", user_emb)
    if user_emb.shape != original_user_emb.shape:
        raise ValueError(f"shape mismatch: {user_emb.shape} vs {original_user_emb.shape}")
    diff = user_emb - original_user_emb
    return float(np.sum(diff * diff))


def l2_reg_grad(user_emb: np.ndarray, original_user_emb: np.ndarray) -> np.ndarray:
    user_emb = getattr(user_emb, "user_emb", user_emb)
    if user_emb.shape != original_user_emb.shape:
        raise ValueError(f"shape mismatch: {user_emb.shape} vs {original_user_emb.shape}")
    return 2.0 * (user_emb - original_user_emb)


def rbo(list_a: Sequence, list_b: Sequence, p: float = 0.9) -> float:
    """Rank-biased overlap truncated at depth L and normalized so identical lists give 1.

        RBO@L = (1 - p) / (1 - p^L) * sum_{t=1..L} p^(t-1) |a[:t] & b[:t]| / t
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    L = len(list_a)
    if len(list_b) != L:
        raise ValueError(f"lists differ in length ({L} vs {len(list_b)})")
    if L == 0:
        raise ValueError("lists must be non-empty")
    seen_a, seen_b = set(), set()
    overlap = 0
    total = 0.0
    for t, (x, y) in enumerate(zip(list_a, list_b), start=1):
        if x == y:
            overlap += 1
        else:
            overlap += (x in seen_b) + (y in seen_a)
        seen_a.add(x)
        seen_b.add(y)
        total += p ** (t - 1) * overlap / t
    return min(1.0, (1 - p) / (1 - p ** L) * total)


def topk_lists(table: EmbeddingTable, exclusions: Sequence[np.ndarray], k: int) -> np.ndarray:
    scores = table.user_emb @ table.item_emb.T
    return np.stack([top_k_from_scores(scores[u], k, exclusions[u])[0] for u in range(table.M)])


def mean_rbo(lists_a: np.ndarray, lists_b: np.ndarray, p: float = 0.9) -> float:
    return float(np.mean([rbo(a.tolist(), b.tolist(), p) for a, b in zip(lists_a, lists_b)]))


def perturbation_study(
    table: EmbeddingTable,
    train: Optional[InteractionSet],
    trials: int = 300,
    budget: float = 0.5,
    k: int = 20,
    depth: int = 10,
    p: float = 0.9,
    reg: Optional[RegConfig] = None,
    seed: int = 0,
):
    """Random user-embedding perturbations vs. both regularizers and RBO@depth.

    Each trial draws Gaussian noise with std ``budget / sqrt(d)`` per user row
    and projects any row whose norm exceeds ``budget`` back onto the ball.
    Returns a list of ``(l2, l_r, rbo)`` rows.
    """
    reg = reg or RegConfig(k=k)
    snap = snapshot(table, train, reg.k, seed)
    rr = RankRegularizer(snap, reg)
    excl = _exclusions(train, table.M)
    reference = topk_lists(table, excl, depth)
    rng = rng_for(seed, "perturb")
    rows = []
    for _ in range(trials):
        if budget > 0:
            noise = rng.normal(0.0, budget / np.sqrt(table.d), size=table.user_emb.shape)
            norms = np.linalg.norm(noise, axis=1, keepdims=True)
            noise *= np.minimum(1.0, budget / np.maximum(norms, 1e-300))
        else:
            noise = np.zeros_like(table.user_emb)
        moved = EmbeddingTable(table.user_emb + noise, table.item_emb)
        rows.append((
            l2_reg_loss(moved.user_emb, table.user_emb),
            rr.loss(moved),
            mean_rbo(reference, topk_lists(moved, excl, depth), p),
        ))
    return rows
