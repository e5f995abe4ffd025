"""Ranking and CTR metrics, and the Wilcoxon signed-rank test."""
from __future__ import annotations

import math
from collections import Counter

import numpy as np
from scipy.stats import norm, rankdata


def recall_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("empty relevant set")
    hits = sum(1 for x in list(ranked)[:k] if x in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-gain NDCG with ``1 / log2(rank + 1)`` discounting."""
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("empty relevant set")
    dcg = sum(1.0 / math.log2(p + 2) for p, x in enumerate(list(ranked)[:k]) if x in relevant)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(k, len(relevant))))
    return dcg / idcg


def auc(scores, labels) -> float:
    """Rank-sum AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_at_threshold(scores, labels, threshold: float = 0.5) -> float:
    """F1 of the positive class, predicting 1 when ``sigmoid(score) >= threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    with np.errstate(over="ignore"):
        prob = 1.0 / (1.0 + np.exp(-scores))
    pred = prob >= threshold
    tp = int((pred & (labels == 1)).sum())
    fp = int((pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def _exact_null_counts(doubled_ranks) -> Counter:
    """Distribution of the doubled positive rank sum over all sign patterns."""
    dist = Counter({0: 1})
    for r in doubled_ranks:
        nxt = Counter(dist)
        for s, c in dist.items():
            nxt[s + r] += c
        dist = nxt
    return dist


def wilcoxon_signed_rank(a, b, exact_max_n: int = 12) -> tuple[float, float]:
    """Two-sided paired test. Returns ``(min(W+, W-), p_value)``.

    Zero differences are dropped and tied magnitudes share their average
    rank. Up to ``exact_max_n`` nonzero pairs the p-value comes from the
    exact null distribution, otherwise from the tie-corrected normal
    approximation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise ValueError("need two equal-length non-empty samples")
    diff = a - b
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        return 0.0, 1.0
    ranks = rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int).tolist()
        dist = _exact_null_counts(doubled)
        total = 2 ** n
        w2 = int(round(2 * stat))
        tail = sum(c for s, c in dist.items() if s <= w2)
        return stat, min(1.0, 2.0 * tail / total)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (counts ** 3 - counts).sum() / 48.0
    z = (stat - mean) / math.sqrt(var)
    return stat, float(min(1.0, 2.0 * norm.cdf(z)))
