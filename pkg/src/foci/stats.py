"""Rank statistics: ROC AUC as a normalized Mann-Whitney U, exact Wilcoxon signed-rank."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 15


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length vectors, got {s.shape} and {y.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W+, the sum of ranks of positive differences
    w_minus: float
    n: int
    p_two_sided: float
    p_greater: float
    p_less: float
    exact: bool


def wilcoxon_signed_rank(differences) -> WilcoxonResult:
    """Paired Wilcoxon signed-rank test; exact by enumeration for n <= 15.

    Zero differences are dropped. Ties in ``|d|`` get average ranks, and the
    exact null enumerates all ``2**n`` sign assignments of those ranks.
    """
    d = np.asarray(differences, dtype=np.float64).reshape(-1)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all differences are zero; the signed-rank test is undefined")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = float(ranks.sum())
    w_minus = total - w_plus
    if n <= EXACT_MAX_N:
        # doubled ranks are integers even with average-rank ties
        r2 = np.rint(2 * ranks).astype(np.int64)
        sums = np.zeros(1, dtype=np.int64)
        for r in r2:
            sums = np.concatenate([sums, sums + r])
        obs2 = int(round(2 * w_plus))
        count = len(sums)
        p_greater = np.count_nonzero(sums >= obs2) / count
        p_less = np.count_nonzero(sums <= obs2) / count
        centre2 = int(r2.sum())  # 2 * E[W+] * 2
        dev = abs(2 * obs2 - centre2)
        p_two = np.count_nonzero(np.abs(2 * sums - centre2) >= dev) / count
        return WilcoxonResult(w_plus, w_minus, n, float(min(1.0, p_two)), float(p_greater), float(p_less), True)
    mean = total / 2.0
    var = float((ranks**2).sum()) / 4.0
    z = (w_plus - mean) / math.sqrt(var)
    return WilcoxonResult(
        w_plus,
        w_minus,
        n,
        float(min(1.0, 2 * norm.sf(abs(z)))),
        float(norm.sf(z)),
        float(norm.cdf(z)),
        False,
    )

