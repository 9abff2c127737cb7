"""Multi-order Plackett-Luce distance objective with analytic gradients.

Scores are "higher means closer".  Candidates are ordered by ascending
ground-truth distance; the first-order term is a partial Plackett-Luce
likelihood of that order, the second-order term is the same likelihood over
pairwise score gaps ordered by their distance gaps (largest spatial gap first).
Distances only enter through these two sort orders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def pair_count(k1: int) -> int:
    return k1 * (k1 - 1) // 2


def second_order_count(k1: int, top_k1: int) -> int:
    """Number of leading gap pairs in the second-order loss.

    ((k1 - 1) + (k1 - K1)) * K1 / 2, i.e. the pairs (i, j), i < j, with i among
    the K1 nearest candidates.
    """
    return ((k1 - 1) + (k1 - top_k1)) * top_k1 // 2


@dataclass(frozen=True)
class LossConfig:
    k1: int
    lam: float = 0.7
    top_k1: int = 1

    def __post_init__(self):
        if self.k1 < 1:
            raise ValueError(f"k1 must be >= 1, got {self.k1}")
        if not (isinstance(self.lam, (int, float)) and 0.0 <= self.lam <= 1.0):
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 1 <= self.top_k1 <= self.k1:
            raise ValueError(f"K1 must satisfy 1 <= K1 <= k1, got K1={self.top_k1}, k1={self.k1}")

    @property
    def top_k2(self) -> int:
        return second_order_count(self.k1, self.top_k1)

    @property
    def n_pairs(self) -> int:
        return pair_count(self.k1)


@dataclass(frozen=True)
class DistanceLabels:
    d: np.ndarray
    pi: np.ndarray  # candidate indices by ascending distance
    pair_i: np.ndarray  # sorted positions (i < j) of every pair, in pair_order
    pair_j: np.ndarray
    delta_d: np.ndarray  # d[pi[i]] - d[pi[j]] for pairs in lexicographic (i, j) order
    pair_order: np.ndarray

    @classmethod
    def from_distances(cls, d) -> "DistanceLabels":
        d = np.asarray(d, dtype=np.float64)
        if d.ndim != 1 or d.size == 0:
            raise ValueError("distance labels must be a non-empty vector")
        if not np.all(np.isfinite(d)):
            raise ValueError("non-finite distance label")
        pi = np.argsort(d, kind="stable")
        ii, jj = np.triu_indices(d.size, k=1)
        ds = d[pi]
        delta = ds[ii] - ds[jj]
        order = np.argsort(delta, kind="stable")
        return cls(d, pi, ii[order], jj[order], delta, order)

    @property
    def k1(self) -> int:
        return self.d.size


def _partial_pl(t: np.ndarray, top: int) -> tuple[float, np.ndarray]:
    """-mean_{i<top} log softmax(t[i:])[0] and its gradient w.r.t. t."""
    n = t.size
    lse = np.logaddexp.accumulate(t[::-1])[::-1]
    loss = -float(np.sum(t[:top] - lse[:top])) / top
    # row i of the softmax chain covers positions i..n-1
    p = np.exp(t[None, :] - lse[:top, None])
    p[np.tril_indices(top, k=-1, m=n)] = 0.0
    grad = p.sum(axis=0)
    grad[:top] -= 1.0
    return loss, grad / top


def _check_scores(scores, labels: DistanceLabels) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != labels.d.shape:
        raise ValueError(f"{s.size} scores for {labels.k1} distance labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite scores")
    return s


def loss_first_order(scores, labels: DistanceLabels, cfg: LossConfig):
    s = _check_scores(scores, labels)
    if cfg.k1 != labels.k1:
        raise ValueError(f"config k1={cfg.k1} but {labels.k1} labels")
    if labels.k1 == 1:
        return 0.0, np.zeros(1)
    loss, g_sorted = _partial_pl(s[labels.pi], cfg.top_k1)
    grad = np.empty_like(g_sorted)
    grad[labels.pi] = g_sorted
    return loss, grad


def loss_second_order(scores, labels: DistanceLabels, cfg: LossConfig):
    s = _check_scores(scores, labels)
    if labels.k1 < 2:
        raise ValueError("second-order loss needs k1 >= 2 (no pairs)")
    if cfg.k1 != labels.k1:
        raise ValueError(f"config k1={cfg.k1} but {labels.k1} labels")
    t = s[labels.pi]
    gaps = t[labels.pair_i] - t[labels.pair_j]
    loss, g_gap = _partial_pl(gaps, cfg.top_k2)
    g_t = np.zeros(labels.k1)
    np.add.at(g_t, labels.pair_i, g_gap)
    np.subtract.at(g_t, labels.pair_j, g_gap)
    grad = np.empty_like(g_t)
    grad[labels.pi] = g_t
    return loss, grad


def loss_total(scores, labels: DistanceLabels, cfg: LossConfig):
    """Returns ``(loss, grad, loss1, loss2)``; a term with zero weight is not evaluated."""
    lam = cfg.lam
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        l1, g1 = loss_first_order(scores, labels, cfg)
        return l1, g1, l1, 0.0
    l2, g2 = loss_second_order(scores, labels, cfg)
    if lam == 0.0:
        return l2, g2, 0.0, l2
    l1, g1 = loss_first_order(scores, labels, cfg)
    return lam * l1 + (1 - lam) * l2, lam * g1 + (1 - lam) * g2, l1, l2
