"""Gaussian-kernel MMD, anchor sampling and the distinguishability loss.

All gradients are analytic and use ``d k(x, y) / dx = k(x, y) (y - x) / sigma^2``
for ``k(x, y) = exp(-||x - y||^2 / (2 sigma^2))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .seeding import rng_for

MIN_BANDWIDTH = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"kernel bandwidth must be > 0, got {self.bandwidth}")


@dataclass
class EvalCounter:
    """Counts MMD^2 evaluations and kernel matrix entries computed."""

    mmd_evals: int = 0
    kernel_entries: int = 0

    def reset(self) -> None:
        self.mmd_evals = 0
        self.kernel_entries = 0


class GroupIndex:
    """Partition of users by attribute class, with mixture weights |P_i| / M."""

    def __init__(self, groups: Sequence[np.ndarray], n_users: Optional[int] = None, names: Optional[Sequence[str]] = None):
        self.groups: List[np.ndarray] = [np.asarray(g, dtype=np.int64) for g in groups]
        if len(self.groups) < 2:
            raise ValueError(f"need at least 2 attribute classes, got {len(self.groups)}")
        total = sum(len(g) for g in self.groups)
        self.n_users = total if n_users is None else n_users
        allu = np.concatenate(self.groups)
        if len(np.unique(allu)) != len(allu) or total != self.n_users:
            raise ValueError("groups must partition all users")
        self.weights = np.array([len(g) / self.n_users for g in self.groups])
        self.names = list(names) if names is not None else [str(i) for i in range(len(self.groups))]

    @classmethod
    def from_labels(cls, labels, cardinality: Optional[int] = None) -> "GroupIndex":
        labels = np.asarray(labels, dtype=np.int64)
        T = int(cardinality if cardinality is not None else labels.max() + 1)
        groups = [np.flatnonzero(labels == t) for t in range(T)]
        empty = [t for t, g in enumerate(groups) if len(g) == 0]
        if empty:
            raise ValueError(f"attribute class(es) {empty} have no users")
        return cls(groups, len(labels))

    @property
    def T(self) -> int:
        return len(self.groups)

    def labels(self) -> np.ndarray:
        out = np.empty(self.n_users, dtype=np.int64)
        for t, g in enumerate(self.groups):
            out[g] = t
        return out


@dataclass
class AnchorSample:
    points: np.ndarray  # S x d
    indices: np.ndarray = field(default=None)

    @property
    def S(self) -> int:
        return self.points.shape[0]


def sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * (X @ Y.T)
    return np.maximum(d, 0.0)


def gaussian_kernel(X: np.ndarray, Y: np.ndarray, kernel: KernelSpec, counter: Optional[EvalCounter] = None) -> np.ndarray:
    if counter is not None:
        counter.kernel_entries += X.shape[0] * Y.shape[0]
    return np.exp(-sq_dists(X, Y) / (2.0 * kernel.bandwidth ** 2))


def median_bandwidth(points: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance, on a seeded subsample of <= max_points rows."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        raise ValueError("median bandwidth needs at least 2 points")
    if points.shape[0] > max_points:
        idx = rng_for(seed, "bandwidth").choice(points.shape[0], max_points, replace=False)
        points = points[np.sort(idx)]
    iu = np.triu_indices(points.shape[0], k=1)
    dist = np.sqrt(sq_dists(points, points)[iu])
    return max(float(np.median(dist)), MIN_BANDWIDTH)


def _offdiag_mean(K: np.ndarray) -> float:
    n = K.shape[0]
    return (K.sum() - np.trace(K)) / (n * (n - 1))


def mmd2_unbiased(A: np.ndarray, B: np.ndarray, kernel: KernelSpec, counter: Optional[EvalCounter] = None) -> float:
    """Unbiased U-statistic estimate of MMD^2; may be slightly negative."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise ValueError(f"mmd2_unbiased needs >= 2 samples per side (got {A.shape[0]}, {B.shape[0]})")
    if counter is not None:
        counter.mmd_evals += 1
    # evaluate in a canonical argument order so swapping A and B is bit-identical
    if (B.shape, B.tobytes()) < (A.shape, A.tobytes()):
        A, B = B, A
    kaa = _offdiag_mean(gaussian_kernel(A, A, kernel, counter))
    kbb = _offdiag_mean(gaussian_kernel(B, B, kernel, counter))
    kab = gaussian_kernel(A, B, kernel, counter).mean()
    return float(kaa + kbb - 2.0 * kab)


def mmd2_biased(A: np.ndarray, B: np.ndarray, kernel: KernelSpec) -> float:
    """V-statistic (diagonal included); always >= 0 up to rounding."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    return float(
        gaussian_kernel(A, A, kernel).mean()
        + gaussian_kernel(B, B, kernel).mean()
        - 2.0 * gaussian_kernel(A, B, kernel).mean()
    )


def mmd2_grad(A: np.ndarray, B: np.ndarray, kernel: KernelSpec, wrt_b: bool = False, counter: Optional[EvalCounter] = None):
    """Unbiased MMD^2 and its gradient w.r.t. ``A`` (and ``B`` if ``wrt_b``).

    Returns ``(value, grad_A, grad_B)``; ``grad_B`` is None unless requested.
    """
    n, m = A.shape[0], B.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"MMD needs >= 2 samples per side (got {n}, {m})")
    if counter is not None:
        counter.mmd_evals += 1
    s2 = kernel.bandwidth ** 2
    Kaa = gaussian_kernel(A, A, kernel, counter)
    Kbb = gaussian_kernel(B, B, kernel, counter)
    Kab = gaussian_kernel(A, B, kernel, counter)
    value = _offdiag_mean(Kaa) + _offdiag_mean(Kbb) - 2.0 * Kab.mean()
    # sum_j K_ij (x_j - x_i); the diagonal contributes zero
    gA = 2.0 / (n * (n - 1)) * (Kaa @ A - Kaa.sum(1)[:, None] * A) / s2
    gA -= 2.0 / (n * m) * (Kab @ B - Kab.sum(1)[:, None] * A) / s2
    gB = None
    if wrt_b:
        gB = 2.0 / (m * (m - 1)) * (Kbb @ B - Kbb.sum(1)[:, None] * B) / s2
        gB -= 2.0 / (n * m) * (Kab.T @ A - Kab.sum(0)[:, None] * B) / s2
    return float(value), gA, gB


def sample_anchor(user_emb: np.ndarray, groups: GroupIndex, S: int, seed: int = 0) -> AnchorSample:
    """Draw S rows uniformly (with replacement) from the pooled user embeddings.

    Uniform over users is exactly the mixture sum_i beta_i P_i with
    beta_i = |P_i| / M.
    """
    if S < 2:
        raise ValueError("anchor sample size must be >= 2")
    user_emb = getattr(user_emb, "user_emb", user_emb)
    pool = np.concatenate(groups.groups)
    idx = pool[rng_for(seed, "anchor").integers(0, len(pool), size=S)]
    return AnchorSample(points=user_emb[idx].copy(), indices=idx)


def _check_groups(groups: GroupIndex) -> None:
    for name, g in zip(groups.names, groups.groups):
        if len(g) < 2:
            raise ValueError(f"attribute class {name!r} has {len(g)} member(s); need at least 2")


def _member_rows(g: np.ndarray, max_members: Optional[int], rng: Optional[np.random.Generator]) -> np.ndarray:
    if max_members is None or len(g) <= max_members:
        return g
    if rng is None:
        raise ValueError("group subsampling requires an rng")
    return np.sort(rng.choice(g, max_members, replace=False))


def distinguishability_loss_grad(
    user_emb: np.ndarray,
    groups: GroupIndex,
    anchor: AnchorSample,
    kernel: KernelSpec,
    counter: Optional[EvalCounter] = None,
    max_members: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    need_grad: bool = True,
) -> Tuple[float, Optional[np.ndarray]]:
    """Mean over classes of MMD^2(class embeddings, anchor); anchor held constant.

    Exactly ``T`` MMD evaluations are performed. Returns ``(loss, grad)`` with
    ``grad`` of shape ``user_emb.shape``.
    """
    user_emb = getattr(user_emb, "user_emb", user_emb)
    _check_groups(groups)
    T = groups.T
    total = 0.0
    grad = np.zeros_like(user_emb) if need_grad else None
    for g in groups.groups:
        rows = _member_rows(g, max_members, rng)
        if need_grad:
            value, gA, _ = mmd2_grad(user_emb[rows], anchor.points, kernel, counter=counter)
            grad[rows] += gA / T
        else:
            value = mmd2_unbiased(user_emb[rows], anchor.points, kernel, counter)
        total += value
    return total / T, grad


def distinguishability_loss(user_emb, groups: GroupIndex, anchor: AnchorSample, kernel: KernelSpec,
                            counter: Optional[EvalCounter] = None) -> float:
    return distinguishability_loss_grad(user_emb, groups, anchor, kernel, counter, need_grad=False)[0]


def distinguishability_grad(user_emb, groups: GroupIndex, anchor: AnchorSample, kernel: KernelSpec) -> np.ndarray:
    return distinguishability_loss_grad(user_emb, groups, anchor, kernel)[1]


def pairwise_loss_grad(
    user_emb: np.ndarray,
    groups: GroupIndex,
    kernel: KernelSpec,
    counter: Optional[EvalCounter] = None,
    max_members: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    need_grad: bool = True,
) -> Tuple[float, Optional[np.ndarray]]:
    """Mean MMD^2 over all T(T-1)/2 class pairs; for T = 2 this is the binary loss.

    Gradients flow into both members of every pair.
    """
    user_emb = getattr(user_emb, "user_emb", user_emb)
    _check_groups(groups)
    rows = [_member_rows(g, max_members, rng) for g in groups.groups]
    T = groups.T
    n_pairs = T * (T - 1) // 2
    total = 0.0
    grad = np.zeros_like(user_emb) if need_grad else None
    for i in range(T):
        for j in range(i + 1, T):
            if need_grad:
                value, gA, gB = mmd2_grad(user_emb[rows[i]], user_emb[rows[j]], kernel, wrt_b=True, counter=counter)
                grad[rows[i]] += gA / n_pairs
                grad[rows[j]] += gB / n_pairs
            else:
                value = mmd2_unbiased(user_emb[rows[i]], user_emb[rows[j]], kernel, counter)
            total += value
    return total / n_pairs, grad


def mmd2_pairwise_loss(user_emb, groups: GroupIndex, kernel: KernelSpec, counter: Optional[EvalCounter] = None) -> float:
    return pairwise_loss_grad(user_emb, groups, kernel, counter, need_grad=False)[0]
