"""Descriptive and nonparametric statistics for SRT comparisons.

Exact p-values are obtained by counting, over the full permutation null, how
many relabelings produce a statistic at least as extreme as the observed one.
Ranks are tie-averaged; doubling them keeps every rank sum an integer so the
counting is done with exact integer arithmetic.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from itertools import permutations
from math import comb

import numpy as np
from scipy import stats as sps

WILCOXON_EXACT_MAX = 20
MANN_WHITNEY_EXACT_MAX = 16
FRIEDMAN_EXACT_MAX_SUBJECTS = 6
FRIEDMAN_EXACT_MAX_TREATMENTS = 5


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: str  # "exact" | "normal-approximation" | "chi-square-approximation"
    n_effective: int
    degenerate: bool = False

    def to_dict(self):
        return {"statistic": self.statistic, "p_value": self.p_value, "method": self.method,
                "n_effective": self.n_effective, "degenerate": self.degenerate}


def median_mad(xs):
    """Median and unscaled median absolute deviation from the median."""
    x = np.asarray(xs, dtype=float)
    if x.size == 0:
        raise StatsError("median_mad of an empty sequence")
    m = float(np.median(x))
    return m, float(np.median(np.abs(x - m)))


def box_summary(xs) -> dict:
    """Numbers behind a box-and-whiskers plot: 5/25/50/75/95 percentiles, mean, outliers."""
    x = np.asarray(xs, dtype=float)
    if x.size == 0:
        raise StatsError("box_summary of an empty sequence")
    p5, q1, med, q3, p95 = np.percentile(x, [5, 25, 50, 75, 95])
    _, mad = median_mad(x)
    return {"p5": p5, "q1": q1, "median": med, "q3": q3, "p95": p95, "mean": float(x.mean()),
            "mad": mad, "n": int(x.size), "outliers": sorted(float(v) for v in x[(x < p5) | (x > p95)])}


def _doubled_ranks(values):
    r = sps.rankdata(values)
    return np.rint(2 * r).astype(np.int64)


def _tie_term(values):
    _, counts = np.unique(values, return_counts=True)
    return float(np.sum(counts ** 3 - counts))


def _subset_sum_counts(weights):
    """counts[s] = number of subsets of ``weights`` with sum s."""
    counts = np.zeros(int(np.sum(weights)) + 1, dtype=object)
    counts[0] = 1
    for w in weights:
        counts[w:] = counts[w:] + counts[: len(counts) - w].copy()
    return counts


def _two_sided_normal(z):
    return float(min(1.0, 2.0 * sps.norm.sf(abs(z))))


def wilcoxon_signed_rank(values_a, values_b=None, method: str = "auto") -> TestResult:
    """Wilcoxon signed-rank test for matched pairs (two-sided).

    Zero differences are dropped. The statistic is min(W+, W-).
    """
    a = np.asarray(values_a, dtype=float)
    d = a if values_b is None else a - np.asarray(values_b, dtype=float)
    if values_b is not None and len(values_a) != len(values_b):
        raise StatsError("paired samples differ in length")
    d = d[d != 0]
    n = d.size
    if n == 0:
        return TestResult(0.0, 1.0, "exact", 0, degenerate=True)
    r2 = _doubled_ranks(np.abs(d))
    total2 = int(r2.sum())
    w2 = int(r2[d > 0].sum())
    statistic = min(w2, total2 - w2) / 2
    if method == "auto":
        method = "exact" if n <= WILCOXON_EXACT_MAX else "normal-approximation"
    if method == "exact":
        counts = _subset_sum_counts(r2)
        s = np.arange(counts.size)
        dev = abs(2 * w2 - total2)
        extreme = int(np.sum(counts[np.abs(2 * s - total2) >= dev]))
        return TestResult(statistic, min(1.0, extreme / 2 ** n), "exact", n)
    mean = n * (n + 1) / 4
    var = n * (n + 1) * (2 * n + 1) / 24 - _tie_term(np.abs(d)) / 48
    if var <= 0:
        return TestResult(statistic, 1.0, "normal-approximation", n, degenerate=True)
    z = max(abs(w2 / 2 - mean) - 0.5, 0.0) / np.sqrt(var)
    return TestResult(statistic, _two_sided_normal(z), "normal-approximation", n)


def _size_subset_sum_counts(weights, k):
    """counts[j][s] = number of j-subsets with sum s, for j <= k."""
    top = int(np.sum(np.sort(weights)[::-1][:k]))
    counts = np.zeros((k + 1, top + 1), dtype=object)
    counts[0, 0] = 1
    for w in weights:
        for j in range(k, 0, -1):
            counts[j, w:] = counts[j, w:] + counts[j - 1, : top + 1 - w]
    return counts[k]


def mann_whitney_u(xs, ys, method: str = "auto") -> TestResult:
    """Two-sided Mann-Whitney U test. The statistic is min(U_x, U_y)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    n, m = x.size, y.size
    if n == 0 or m == 0:
        raise StatsError("Mann-Whitney U needs two nonempty groups")
    both = np.concatenate([x, y])
    N = n + m
    r2 = _doubled_ranks(both)
    R2 = int(r2[:n].sum())
    u_x = R2 / 2 - n * (n + 1) / 2
    statistic = min(u_x, n * m - u_x)
    expected2 = n * (N + 1)  # doubled expected rank sum
    if method == "auto":
        method = "exact" if N <= MANN_WHITNEY_EXACT_MAX else "normal-approximation"
    if method == "exact":
        counts = _size_subset_sum_counts(r2, n)
        s = np.arange(counts.size)
        extreme = int(np.sum(counts[np.abs(s - expected2) >= abs(R2 - expected2)]))
        return TestResult(statistic, min(1.0, extreme / comb(N, n)), "exact", N)
    var = n * m / 12 * ((N + 1) - _tie_term(both) / (N * (N - 1)))
    if var <= 0:
        return TestResult(statistic, 1.0, "normal-approximation", N, degenerate=True)
    z = max(abs(u_x - n * m / 2) - 0.5, 0.0) / np.sqrt(var)
    return TestResult(statistic, _two_sided_normal(z), "normal-approximation", N)


def _friedman_q(rank_sums, n, k, tie_term):
    q = 12.0 / (n * k * (k + 1)) * np.sum(np.asarray(rank_sums, float) ** 2) - 3.0 * n * (k + 1)
    c = 1.0 - tie_term / (n * (k ** 3 - k))
    return q / c


def friedman(blocks, method: str = "auto") -> TestResult:
    """Friedman test on a k-treatments x n-subjects matrix.

    Exact p counts every within-subject permutation of the observed rank
    vectors (tie patterns preserved) for n <= 6 subjects.
    """
    X = np.asarray(blocks, dtype=float)
    if X.ndim != 2:
        raise StatsError("Friedman test needs a 2-D treatments x subjects matrix")
    k, n = X.shape
    if k < 3:
        raise StatsError(f"Friedman test needs at least 3 treatments, got {k}")
    if n < 2:
        raise StatsError(f"Friedman test needs at least 2 subjects, got {n}")
    ranks2 = np.stack([_doubled_ranks(X[:, j]) for j in range(n)], axis=1)  # [k, n]
    tie_term = sum(_tie_term(X[:, j]) for j in range(n))
    if tie_term == n * (k ** 3 - k):
        return TestResult(0.0, 1.0, "exact", n, degenerate=True)
    obs = ranks2.sum(axis=1)
    q = float(_friedman_q(obs / 2, n, k, tie_term))
    if method == "auto":
        exact_ok = n <= FRIEDMAN_EXACT_MAX_SUBJECTS and k <= FRIEDMAN_EXACT_MAX_TREATMENTS
        method = "exact" if exact_ok else "chi-square-approximation"
    if method == "exact":
        # distribution of the doubled rank-sum vector over all relabelings
        dist = Counter({(0,) * k: 1})
        total = 1
        for j in range(n):
            perms = Counter(permutations(ranks2[:, j].tolist()))
            total *= sum(perms.values())
            nxt = Counter()
            for state, c in dist.items():
                for p, cp in perms.items():
                    nxt[tuple(a + b for a, b in zip(state, p))] += c * cp
            dist = nxt
        obs_ss = int(np.sum(obs.astype(np.int64) ** 2))
        extreme = sum(c for state, c in dist.items() if sum(v * v for v in state) >= obs_ss)
        return TestResult(q, min(1.0, extreme / total), "exact", n)
    return TestResult(q, float(sps.chi2.sf(q, k - 1)), "chi-square-approximation", n)


def run_test(name: str, payload: dict) -> TestResult:
    """Dispatch used by the CLI: ``payload`` holds the test's input arrays."""
    method = payload.get("method", "auto")
    if name == "wilcoxon":
        return wilcoxon_signed_rank(payload["values_a"], payload["values_b"], method=method)
    if name in ("mann-whitney", "mannwhitney", "mwu"):
        return mann_whitney_u(payload["xs"], payload["ys"], method=method)
    if name == "friedman":
        return friedman(payload["blocks"], method=method)
    raise StatsError(f"unknown test {name!r}")
