"""Ranking-quality and correlation metrics.

Accuracies are clipped to a fitted window and linearly rescaled into a
bounded relevance range before being fed to the gain-based metrics. The
gain of an item is ``2**rel - 1`` and positions are discounted by
``1/log2(position + 1)`` (1-based positions), so misplacing a high-relevance
item near the top costs far more than shuffling the tail.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats


class DegenerateRelevanceWarning(UserWarning):
    """All relevances are zero: every ordering is ideal."""


@dataclass(frozen=True)
class RelevanceMap:
    """Clipping window mapping accuracy (percent) to relevance in [0, max_rel]."""

    lower: float
    upper: float
    max_rel: float = 20.0

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"relevance map needs lower < upper, got ({self.lower}, {self.upper})")
        if self.max_rel <= 0:
            raise ValueError(f"max_rel must be positive, got {self.max_rel}")


@dataclass(frozen=True)
class RankedItem:
    id: str
    score: float
    rel: float


@dataclass(frozen=True)
class RankedList:
    """Items in descending predicted-score order, ties broken by ascending id."""

    items: tuple[RankedItem, ...]

    def __post_init__(self):
        for a, b in zip(self.items, self.items[1:]):
            if (a.score, b.id) < (b.score, a.id):
                raise ValueError(f"items not in (score desc, id asc) order at ids {a.id!r}, {b.id!r}")
        for it in self.items:
            if it.rel < 0:
                raise ValueError(f"negative relevance {it.rel} for id {it.id!r}")

    def __len__(self):
        return len(self.items)

    @property
    def rels(self) -> np.ndarray:
        return np.array([it.rel for it in self.items], dtype=np.float64)


def rank_by_score(entries: Sequence[tuple[str, float, float]]) -> RankedList:
    """Build a RankedList from (id, score, rel) triples.

    Sorting is descending by score with ties broken by ascending id, so the
    ranking is reproducible across runs and platforms.
    """
    ordered = sorted(entries, key=lambda e: (-e[1], e[0]))
    return RankedList(tuple(RankedItem(i, s, r) for i, s, r in ordered))


def fit_relevance_map(train_accs: Sequence[float], q: float = 0.2, max_rel: float = 20.0) -> RelevanceMap:
    """Fit the clipping window: lower = q-quantile of the training accuracies
    (linear-interpolation quantile), upper = their maximum.
    """
    accs = np.asarray(train_accs, dtype=np.float64)
    if accs.size < 2:
        raise ValueError("need at least 2 accuracy values to fit a relevance map")
    lower = float(np.quantile(accs, q, method="linear"))
    upper = float(np.max(accs))
    if lower >= upper:
        raise ValueError("degenerate relevance map: quantile equals maximum (values too concentrated)")
    return RelevanceMap(lower=lower, upper=upper, max_rel=max_rel)


def map_relevance(m: RelevanceMap, acc):
    """Clip accuracy to [lower, upper] and rescale linearly into [0, max_rel].

    Accepts a scalar or an ndarray.
    """
    a = np.clip(np.asarray(acc, dtype=np.float64), m.lower, m.upper)
    rel = m.max_rel * (a - m.lower) / (m.upper - m.lower)
    if np.ndim(acc) == 0:
        return float(rel)
    return rel


def dcg(rels_in_rank_order: Sequence[float]) -> float:
    """Discounted cumulative gain: sum of (2**rel - 1) / log2(i + 1), i 1-based."""
    rels = np.asarray(rels_in_rank_order, dtype=np.float64)
    if rels.size == 0:
        return 0.0
    if np.any(rels < 0):
        raise ValueError("relevance must be nonnegative")
    positions = np.arange(1, rels.size + 1, dtype=np.float64)
    return float(np.sum((np.exp2(rels) - 1.0) / np.log2(positions + 1.0)))


def ndcg(ranked: RankedList, k: int | None = None) -> float:
    """DCG of the model's order divided by the DCG of the relevance-descending
    order (both truncated at k when given). Returns 1.0 with a
    DegenerateRelevanceWarning when the ideal DCG is zero.
    """
    if k is not None and k <= 0:
        raise ValueError(f"cutoff k must be positive, got {k}")
    rels = ranked.rels
    cut = rels.size if k is None else min(k, rels.size)
    ideal = np.sort(rels)[::-1]
    idcg = dcg(ideal[:cut])
    if idcg == 0.0:
        warnings.warn("all-zero relevance list: any order is ideal", DegenerateRelevanceWarning)
        return 1.0
    return dcg(rels[:cut]) / idcg


def delta_ndcg(ranked: RankedList, i: int, j: int) -> float:
    """|NDCG after swapping the items at 0-based positions i and j - NDCG before|.

    Uses the closed form |(gain_i - gain_j) * (disc_i - disc_j)| / IDCG, which
    equals a full recompute exactly in real arithmetic (all other terms cancel).
    """
    n = len(ranked)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"positions ({i}, {j}) out of range for list of length {n}")
    if i == j:
        raise ValueError("positions must differ")
    rels = ranked.rels
    idcg = dcg(np.sort(rels)[::-1])
    if idcg == 0.0:
        return 0.0
    gain_i = float(np.exp2(rels[i])) - 1.0
    gain_j = float(np.exp2(rels[j])) - 1.0
    disc_i = 1.0 / float(np.log2(i + 2.0))
    disc_j = 1.0 / float(np.log2(j + 2.0))
    return abs((gain_i - gain_j) * (disc_i - disc_j)) / idcg


def pairwise_delta_ndcg(rels_in_rank_order: np.ndarray) -> np.ndarray:
    """Matrix of delta_ndcg for every position pair of a ranked list.

    Entry [i, j] matches delta_ndcg on the same list; vectorized for the
    listwise training loop.
    """
    rels = np.asarray(rels_in_rank_order, dtype=np.float64)
    idcg = dcg(np.sort(rels)[::-1])
    if idcg == 0.0:
        return np.zeros((rels.size, rels.size))
    gains = np.exp2(rels) - 1.0
    discounts = 1.0 / np.log2(np.arange(rels.size, dtype=np.float64) + 2.0)
    return np.abs((gains[:, None] - gains[None, :]) * (discounts[:, None] - discounts[None, :])) / idcg


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Tie-corrected (tau-b) rank correlation over all pairs."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("tau undefined when one list is all ties")
    tau = stats.kendalltau(x, y, variant="b").statistic
    return float(tau)


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        raise ValueError("correlation undefined for zero-variance input")
    return float(xc @ yc) / denom


def top_k_regret(selected, space, k: int) -> float:
    """Gap between the best test accuracy in the space and the best test
    accuracy among the first k selected records.

    `selected` is a sequence of records with a test_acc attribute (ordered by
    the selector's preference); `space` is anything with an id-keyed .records
    mapping of such records.
    """
    if not selected:
        raise ValueError("selection is empty")
    if k > len(selected):
        raise ValueError(f"k={k} exceeds selection size {len(selected)}")
    best_space = max(r.test_acc for r in space.records.values())
    best_selected = max(r.test_acc for r in list(selected)[:k])
    return best_space - best_selected
