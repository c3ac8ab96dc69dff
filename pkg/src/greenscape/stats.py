"""Agreement and group-difference statistics.

Exact Wilcoxon signed-rank and Mann-Whitney U p-values are computed by
dynamic programming over rank-sum distributions. Average ranks are
multiples of 1/2, so the recursion runs on doubled ranks and stays in
integers; that makes the exact distribution valid with ties as well
(it is then the permutation distribution conditional on the tie pattern).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Literal, Sequence

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .errors import AllZeros, ConstantSeries, EmptyGroup, LengthMismatch, TooFewEntries

EXACT_CUTOFF = 25
LOA_Z = 1.96


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_value: float
    n: int


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: Literal["exact", "normal_approx"]
    n_effective: int

    __test__ = False  # keep pytest from collecting this class


@dataclass(frozen=True)
class BlandAltmanResult:
    means: tuple[float, ...]
    diffs: tuple[float, ...]
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    wilcoxon: TestResult

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.means, self.diffs))


def _as_series(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).ravel()


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = _as_series(x), _as_series(y)
    if x.size != y.size:
        raise LengthMismatch(f"series lengths differ: {x.size} vs {y.size}")
    return x, y


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Sample correlation with a two-sided t-test p-value."""
    x, y = _pair(x, y)
    n = x.size
    if n < 3:
        raise TooFewEntries(f"pearson needs n >= 3, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantSeries("pearson is undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        p = 0.0
    else:
        t2 = r * r * df / (1.0 - r * r)
        # two-sided tail of Student t via the regularized incomplete beta
        p = float(betainc(df / 2.0, 0.5, df / (df + t2)))
    return CorrelationResult(r, min(1.0, max(0.0, p)), n)


def _two_sided(counts: np.ndarray, observed: int) -> float:
    total = counts.sum()
    lower = counts[: observed + 1].sum() / total
    upper = counts[observed:].sum() / total
    return float(min(1.0, 2.0 * min(lower, upper)))


def _tie_term(values: np.ndarray) -> float:
    _, t = np.unique(values, return_counts=True)
    t = t.astype(np.float64)
    return float(np.sum(t**3 - t))


def _normal_p(stat: float, mean: float, var: float) -> float:
    if var <= 0:
        return 1.0
    z = max(0.0, abs(stat - mean) - 0.5) / math.sqrt(var)
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def signed_rank_distribution(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Counts of each attainable positive (doubled) rank sum over all 2^n sign patterns."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        if r:
            counts[r:] = counts[r:] + counts[:-r].copy()
        else:
            counts = counts * 2
    return counts


def wilcoxon_signed_rank(diffs: Sequence[float], exact_cutoff: int = EXACT_CUTOFF) -> TestResult:
    """Two-sided Wilcoxon signed-rank test of zero median difference.

    Exact zeros are dropped before ranking. The statistic is the smaller of
    the positive and negative rank sums.
    """
    d = _as_series(diffs)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise AllZeros("every difference is zero")
    ranks = rankdata(np.abs(d))
    doubled = np.rint(2 * ranks).astype(np.int64)
    t_plus2 = int(doubled[d > 0].sum())
    t_plus = t_plus2 / 2.0
    statistic = min(t_plus, n * (n + 1) / 2.0 - t_plus)
    if n <= exact_cutoff:
        p = _two_sided(signed_rank_distribution(doubled.tolist()), t_plus2)
        return TestResult(statistic, p, "exact", n)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(np.abs(d)) / 48.0
    return TestResult(statistic, _normal_p(t_plus, mean, var), "normal_approx", n)


def rank_sum_distribution(doubled_ranks: Sequence[int], k: int) -> np.ndarray:
    """Counts of each (doubled) rank sum over all size-``k`` subsets of the pooled ranks."""
    total = int(sum(doubled_ranks))
    table = np.zeros((k + 1, total + 1), dtype=np.int64)
    table[0, 0] = 1
    for r in doubled_ranks:
        for j in range(k, 0, -1):
            if r:
                table[j, r:] += table[j - 1, :-r]
            else:
                table[j] += table[j - 1]
    return table[k]


def mann_whitney_u(a: Sequence[float], b: Sequence[float], exact_cutoff: int = EXACT_CUTOFF) -> TestResult:
    """Two-sided Mann-Whitney U test; the statistic is min(U_a, U_b)."""
    a, b = _as_series(a), _as_series(b)
    na, nb = a.size, b.size
    if na == 0 or nb == 0:
        raise EmptyGroup("both groups must be nonempty")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    doubled = np.rint(2 * ranks).astype(np.int64)
    ra2 = int(doubled[:na].sum())
    u_a = ra2 / 2.0 - na * (na + 1) / 2.0
    statistic = min(u_a, na * nb - u_a)
    n = na + nb
    if n <= exact_cutoff:
        k = min(na, nb)
        dist = rank_sum_distribution(doubled.tolist(), k)
        observed = ra2 if k == na else int(doubled[na:].sum())
        return TestResult(statistic, _two_sided(dist, observed), "exact", n)
    mean = na * nb / 2.0
    var = na * nb / 12.0 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    return TestResult(statistic, _normal_p(u_a, mean, var), "normal_approx", n)


def bland_altman(a: Sequence[float], b: Sequence[float], z: float = LOA_Z) -> BlandAltmanResult:
    """Differences ``a - b`` against pairwise means, with limits of agreement.

    The embedded Wilcoxon test reports p = 1 when every difference is zero.
    """
    a, b = _pair(a, b)
    if a.size < 2:
        raise TooFewEntries(f"bland-altman needs n >= 2, got {a.size}")
    diffs = a - b
    means = (a + b) / 2.0
    mean_diff = float(np.mean(a) - np.mean(b))
    sd = float(np.std(diffs, ddof=1))
    try:
        w = wilcoxon_signed_rank(diffs)
    except AllZeros:
        w = TestResult(0.0, 1.0, "exact", 0)
    return BlandAltmanResult(
        tuple(means.tolist()),
        tuple(diffs.tolist()),
        mean_diff,
        sd,
        mean_diff - z * sd,
        mean_diff + z * sd,
        w,
    )


def quantile_groups(
    entries: Sequence[tuple[Hashable, float]], low_q: float = 0.25, high_q: float = 0.75
) -> tuple[list[Hashable], list[Hashable]]:
    """Split entries into the ``<= Q(low_q)`` and ``>= Q(high_q)`` groups (linear quantiles)."""
    if len(entries) < 4:
        raise TooFewEntries(f"quantile grouping needs >= 4 entries, got {len(entries)}")
    scores = np.array([s for _, s in entries], dtype=np.float64)
    q1, q3 = np.quantile(scores, [low_q, high_q])
    low = [i for i, s in entries if s <= q1]
    high = [i for i, s in entries if s >= q3]
    return low, high


def qq_data(x: Sequence[float], y: Sequence[float], n_quantiles: int = 101) -> list[tuple[float, float]]:
    """Paired linear-interpolation quantiles of two samples at k/(n_quantiles - 1)."""
    x, y = _as_series(x), _as_series(y)
    if x.size == 0 or y.size == 0:
        raise EmptyGroup("both samples must be nonempty")
    if n_quantiles < 2:
        raise ValueError("n_quantiles must be >= 2")
    probs = np.arange(n_quantiles) / (n_quantiles - 1)
    return list(zip(np.quantile(x, probs).tolist(), np.quantile(y, probs).tolist()))


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""
