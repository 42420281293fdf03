"""Full-ranking recommendation metrics and attack summary metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np


@dataclass
class RecReport:
    hr: Dict[int, float] = field(default_factory=dict)
    ndcg: Dict[int, float] = field(default_factory=dict)
    rbo10_vs_original: Optional[float] = None

    @property
    def ks(self):
        return sorted(self.hr)

    def to_dict(self) -> dict:
        out = {"ks": self.ks, "hr": {str(k): v for k, v in sorted(self.hr.items())},
               "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())}}
        if self.rbo10_vs_original is not None:
            out["rbo10_vs_original"] = self.rbo10_vs_original
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        head = "  ".join(f"{m}@{k:<3}" for k in self.ks for m in ("NDCG", "HR"))
        vals = "  ".join(f"{self.ndcg[k]:<7.4f}  {self.hr[k]:<5.4f}" for k in self.ks)
        return head + "\n" + vals


def held_out_ranks(table, split) -> np.ndarray:
    """1-based rank of each user's test item among items outside train and valid.

    Ties are broken by ascending item id, so an item only counts as ahead of
    the test item if it scores higher, or scores equal with a smaller id.
    """
    U, V = table.user_emb, table.item_emb
    items = np.asarray(split.test, dtype=np.int64)
    users = np.arange(len(items))
    seen = np.zeros((table.M, table.N), dtype=bool)
    seen[split.train.users, split.train.items] = True
    seen[users, np.asarray(split.valid, dtype=np.int64)] = True
    ranks = np.empty(len(users), dtype=np.int64)
    for start in range(0, len(users), 1024):
        u = users[start:start + 1024]
        v = items[start:start + 1024]
        s = U[u] @ V.T
        target = s[np.arange(len(u)), v][:, None]
        ids = np.arange(table.N)[None, :]
        ahead = (s > target) | ((s == target) & (ids < v[:, None]))
        ahead &= ~seen[u]
        ranks[start:start + 1024] = ahead.sum(axis=1) + 1
    return ranks


def eval_ranking(table, split, ks: Sequence[int] = (5, 10)) -> RecReport:
    ranks = held_out_ranks(table, split)
    report = RecReport()
    for k in sorted(set(int(k) for k in ks)):
        if k < 1:
            raise ValueError("K must be >= 1")
        hit = ranks <= k
        report.hr[k] = float(hit.mean())
        report.ndcg[k] = float(np.where(hit, 1.0 / np.log2(1.0 + ranks), 0.0).mean())
    return report


def balanced_accuracy(y_true, y_pred, n_classes: Optional[int] = None) -> float:
    """Unweighted mean of per-class recall over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("y_true and y_pred must be equal-length and non-empty")
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def micro_f1(y_true, y_pred) -> float:
    """Micro-averaged F1; equals accuracy for single-label multiclass data."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("y_true and y_pred must be equal-length and non-empty")
    tp = int((y_true == y_pred).sum())
    fp = fn = len(y_true) - tp
    return 2.0 * tp / (2.0 * tp + fp + fn)


def wbacc(baccs: Sequence[float], class_counts: Sequence[float]) -> float:
    """``sum c_i * BAcc_i / sum c_i``."""
    b = np.asarray(baccs, dtype=np.float64)
    c = np.asarray(class_counts, dtype=np.float64)
    if b.shape != c.shape:
        raise ValueError(f"{len(b)} BAcc values but {len(c)} weights")
    if b.size == 0 or (c <= 0).any():
        raise ValueError("weights must be positive and non-empty")
    return float((b * c).sum() / c.sum())


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx == 0 or sy == 0:
        raise ValueError("zero variance: correlation is undefined")
    return float(np.clip((x * y).sum() / (sx * sy), -1.0, 1.0))
