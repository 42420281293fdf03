"""Post-training attribute unlearning on user embeddings, plus the Retrain baseline.

Objectives (alpha is the trade-off coefficient):

* ``d2d_fr``: anchor MMD loss + alpha * ranking hinge regularizer
* ``d2d_pr``: MMD loss + alpha * ||theta - theta*||_F^2
* multi-attribute: ranking regularizer + sum_i alpha_i * anchor MMD loss_i
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cfmodel import EmbeddingTable, TrainConfig, init_embeddings, train_bpr, train_ce
from .dataset import InteractionSet
from .mmd import (
    EvalCounter,
    GroupIndex,
    KernelSpec,
    distinguishability_loss_grad,
    median_bandwidth,
    pairwise_loss_grad,
    sample_anchor,
)
from .optim import make_optimizer
from .rankreg import RankRegularizer, RegConfig, TopKSnapshot, l2_reg_grad, l2_reg_loss, snapshot
from .seeding import sub_seed

log = logging.getLogger(__name__)

METHODS = ("d2d_fr", "d2d_pr")

# trade-off defaults per dataset for the single-attribute objective
DEFAULT_ALPHA = {"ml100k": 2.5e-4, "ml1m": 1.5e-6, "lfm2b": 5e-5, "kuaisar": 1e-5}
# (alpha_1, alpha_2) for the multi-attribute objective
DEFAULT_MULTI_ALPHA = {"ml100k": (1e4, 5e3), "ml1m": (1e5, 5e4), "lfm2b": (1e4, 5e3), "kuaisar": (5e4, 1e4)}


@dataclass
class UnlearnConfig:
    method: str = "d2d_fr"
    alpha: float = 2.5e-4
    learning_rate: float = 20.0
    epochs: int = 500
    seed: int = 0
    reg: RegConfig = field(default_factory=RegConfig)
    optimizer: str = "sgd"
    anchor_size: int = 2048
    max_group_members: int = 1024
    bandwidth: Optional[float] = None  # None: median heuristic at start, then frozen
    pairwise: bool = False  # d2d_pr with T=2: MMD between the two classes directly
    freeze_items: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.anchor_size < 2:
            raise ValueError("anchor_size must be >= 2")


@dataclass
class UnlearnResult:
    table: EmbeddingTable
    trace: List[Dict[str, float]]
    kernel: KernelSpec
    counter: EvalCounter
    diverged: bool = False
    diagnostic: str = ""

    def components(self) -> List[str]:
        return [k for k in self.trace[0] if k != "epoch"] if self.trace else []


class _Distinguishability:
    """One attribute's MMD term with per-epoch anchor resampling."""

    def __init__(self, groups: GroupIndex, cfg: UnlearnConfig, kernel: KernelSpec, counter: EvalCounter, label: str):
        self.groups = groups
        self.cfg = cfg
        self.kernel = kernel
        self.counter = counter
        self.label = label
        self.anchor = None
        self.epoch = -1

    def begin_epoch(self, user_emb: np.ndarray, epoch: int) -> None:
        self.epoch = epoch
        if not self.cfg.pairwise:
            S = min(self.groups.n_users, self.cfg.anchor_size)
            self.anchor = sample_anchor(user_emb, self.groups, S, sub_seed(self.cfg.seed, self.label, "anchor", epoch))

    def loss_grad(self, user_emb: np.ndarray):
        rng = np.random.default_rng(sub_seed(self.cfg.seed, self.label, "members", self.epoch))
        if self.cfg.pairwise:
            return pairwise_loss_grad(user_emb, self.groups, self.kernel, self.counter,
                                      self.cfg.max_group_members, rng)
        return distinguishability_loss_grad(user_emb, self.groups, self.anchor, self.kernel, self.counter,
                                            self.cfg.max_group_members, rng)


def _kernel_for(table: EmbeddingTable, cfg: UnlearnConfig) -> KernelSpec:
    if cfg.bandwidth is not None:
        return KernelSpec(cfg.bandwidth)
    return KernelSpec(median_bandwidth(table.user_emb, seed=cfg.seed))


def _optimize(table, cfg, mmd_terms, mmd_weights, reg_term, reg_weight, kernel, counter, names):
    """Shared descent loop. ``reg_term(table) -> (loss, gU, gV or None)``."""
    table = table.copy()
    params = [table.user_emb] if cfg.freeze_items else [table.user_emb, table.item_emb]
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    trace: List[Dict[str, float]] = []
    last_good = table
    for epoch in range(cfg.epochs):
        gU = np.zeros_like(table.user_emb)
        gV = np.zeros_like(table.item_emb)
        row: Dict[str, float] = {"epoch": epoch}
        total = 0.0
        for name, term, w in zip(names, mmd_terms, mmd_weights):
            term.begin_epoch(table.user_emb, epoch)
            lu, g = term.loss_grad(table.user_emb)
            row[name] = lu
            total += w * lu
            gU += w * g
        l_reg, rU, rV = reg_term(table)
        row["l_reg"] = l_reg
        total += reg_weight * l_reg
        row["total"] = total
        if not np.isfinite(total) or not (np.isfinite(gU).all() and np.isfinite(rU).all()):
            msg = f"non-finite loss at epoch {epoch}: " + ", ".join(f"{k}={v}" for k, v in row.items())
            log.warning(msg)
            return last_good, trace, True, msg
        trace.append(row)
        gU += reg_weight * rU
        if rV is not None:
            gV += reg_weight * rV
        last_good = table.copy()
        opt.step([gU] if cfg.freeze_items else [gU, gV])
        if not table.is_finite():
            msg = f"embeddings became non-finite after epoch {epoch}"
            log.warning(msg)
            return last_good, trace, True, msg
    return table, trace, False, ""


def _reg_for(cfg: UnlearnConfig, table: EmbeddingTable, snap: Optional[TopKSnapshot], train: Optional[InteractionSet]):
    if cfg.method == "d2d_pr":
        theta_star = table.user_emb.copy()

        def l2_term(t):
            return l2_reg_loss(t.user_emb, theta_star), l2_reg_grad(t.user_emb, theta_star), None

        return l2_term
    if snap is None:
        snap = snapshot(table, train, cfg.reg.k, cfg.seed)
    rr = RankRegularizer(snap, cfg.reg)
    return rr.loss_grad


def unlearn(
    table: EmbeddingTable,
    groups: GroupIndex,
    cfg: UnlearnConfig,
    train: Optional[InteractionSet] = None,
    snap: Optional[TopKSnapshot] = None,
) -> UnlearnResult:
    """Minimize ``l_u + alpha * l_reg`` over the embeddings.

    For ``d2d_fr`` the top-k snapshot is taken from ``table`` before the first
    step (``train`` supplies the items to exclude) unless ``snap`` is given.
    For ``d2d_pr`` the original user embeddings are stored as the l2 target.
    The trace holds ``l_u``, ``l_reg`` and ``total`` per epoch, evaluated at
    the parameters entering that epoch.
    """
    if groups.n_users != table.M:
        raise ValueError(f"groups cover {groups.n_users} users, table has {table.M}")
    kernel = _kernel_for(table, cfg)
    counter = EvalCounter()
    reg = _reg_for(cfg, table, snap, train)
    term = _Distinguishability(groups, cfg, kernel, counter, "attr0")
    out, trace, diverged, msg = _optimize(table, cfg, [term], [1.0], reg, cfg.alpha, kernel, counter, ["l_u"])
    return UnlearnResult(out, trace, kernel, counter, diverged, msg)


def unlearn_multi(
    table: EmbeddingTable,
    groups_list: Sequence[GroupIndex],
    alphas: Sequence[float],
    cfg: UnlearnConfig,
    train: Optional[InteractionSet] = None,
    snap: Optional[TopKSnapshot] = None,
) -> UnlearnResult:
    """Minimize ``l_r + sum_i alpha_i * l_u_i``; ``cfg.alpha`` is ignored.

    Note the weights sit on the MMD terms here, not on the regularizer.
    """
    if len(groups_list) != len(alphas):
        raise ValueError("one alpha per attribute is required")
    if any(a < 0 for a in alphas):
        raise ValueError("alphas must be >= 0")
    for g in groups_list:
        if g.n_users != table.M:
            raise ValueError(f"groups cover {g.n_users} users, table has {table.M}")
    kernel = _kernel_for(table, cfg)
    counter = EvalCounter()
    reg = _reg_for(cfg, table, snap, train)
    terms = [_Distinguishability(g, cfg, kernel, counter, f"attr{i}") for i, g in enumerate(groups_list)]
    names = [f"l_u{i + 1}" for i in range(len(terms))]
    out, trace, diverged, msg = _optimize(table, cfg, terms, list(alphas), reg, 1.0, kernel, counter, names)
    return UnlearnResult(out, trace, kernel, counter, diverged, msg)


class RetrainPenalty:
    """alpha * anchor-MMD loss added to each recommendation-training batch.

    Bandwidth and anchor are refreshed at the start of every epoch from the
    current user embeddings.
    """

    def __init__(self, groups: GroupIndex, alpha: float, seed: int = 0, anchor_size: int = 2048,
                 max_group_members: int = 1024):
        self.groups = groups
        self.alpha = alpha
        self.seed = seed
        self.anchor_size = anchor_size
        self.max_group_members = max_group_members
        self.kernel = None
        self.anchor = None
        self.rng = None

    def begin_epoch(self, table: EmbeddingTable, epoch: int) -> None:
        self.kernel = KernelSpec(median_bandwidth(table.user_emb, seed=self.seed))
        S = min(self.groups.n_users, self.anchor_size)
        self.anchor = sample_anchor(table.user_emb, self.groups, S, sub_seed(self.seed, "retrain-anchor", epoch))
        self.rng = np.random.default_rng(sub_seed(self.seed, "retrain-members", epoch))

    def loss_grad(self, table: EmbeddingTable):
        lu, g = distinguishability_loss_grad(table.user_emb, self.groups, self.anchor, self.kernel,
                                             max_members=self.max_group_members, rng=self.rng)
        return self.alpha * lu, self.alpha * g


def retrain_baseline(train: InteractionSet, groups: GroupIndex, cfg: TrainConfig, alpha: float):
    """Train from scratch on ``L_rec + alpha * l_u``.

    Returns ``(table, history)``; each history row has the recommendation
    loss (``loss``) and the mean weighted MMD term (``aux``). With
    ``alpha == 0`` this is exactly ordinary training.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    table = init_embeddings(train.n_users, train.n_items, cfg.dim, cfg.seed)
    aux = RetrainPenalty(groups, alpha, cfg.seed) if alpha > 0 else None
    fit = train_bpr if cfg.loss == "bpr" else train_ce
    return fit(table, train, cfg, aux)


def write_trace(path, trace: Sequence[Dict[str, float]]) -> None:
    """CSV with an ``epoch`` column then one column per component, 6 significant digits."""
    if not trace:
        raise ValueError("empty trace")
    cols = list(trace[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in trace:
            w.writerow([row["epoch"]] + [f"{row[c]:.6g}" for c in cols[1:]])
