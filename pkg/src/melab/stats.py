"""Uncertainty and significance machinery: exact (Clopper-Pearson) binomial
confidence intervals, two-sided permutation tests, and cluster bootstrap
intervals that respect within-episode/query/class dependence.

Clustered resampling stands in for full mixed-effects models: it keeps the
inferential intent (outcomes sharing an episode, query, or class pair are
not independent) with far simpler, directly testable machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma

import numpy as np


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class ClusteredOutcomes:
    """Binary outcomes with the three cluster labels every trial carries."""

    outcomes: np.ndarray
    episode_ids: np.ndarray
    query_ids: np.ndarray
    class_pair_ids: np.ndarray

    def __post_init__(self):
        n = len(self.outcomes)
        for name in ("episode_ids", "query_ids", "class_pair_ids"):
            if len(getattr(self, name)) != n:
                raise StatsError(f"{name} length != number of outcomes")

    def labels(self, cluster_key: str) -> np.ndarray:
        try:
            return {"episode": self.episode_ids, "query": self.query_ids,
                    "class_pair": self.class_pair_ids}[cluster_key]
        except KeyError:
            raise StatsError(f"unknown cluster key {cluster_key!r}") from None


def _log_binom_tail_upper(k: int, n: int, p: float) -> float:
    """P(X >= k) for X ~ Binomial(n, p), computed stably in log space."""
    if p <= 0.0:
        return 0.0 if k > 0 else 1.0
    if p >= 1.0:
        return 1.0
    i = np.arange(k, n + 1)
    logc = lgamma(n + 1) - np.array([lgamma(x + 1) + lgamma(n - x + 1) for x in i])
    logp = logc + i * np.log(p) + (n - i) * np.log1p(-p)
    m = logp.max()
    return float(np.exp(m) * np.sum(np.exp(logp - m)))


def _binom_tail_lower(k: int, n: int, p: float) -> float:
    """P(X <= k)."""
    return 1.0 - _log_binom_tail_upper(k + 1, n, p) if k < n else 1.0


def binomial_ci(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Clopper-Pearson exact interval via bisection on the binomial tails."""
    if n < 1 or not 0 <= successes <= n:
        raise StatsError(f"invalid counts: {successes}/{n}")
    if not 0.0 < level < 1.0:
        raise StatsError(f"level must be in (0,1), got {level}")
    alpha = 1.0 - level

    def solve(fn, target, lo, hi):
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if fn(mid) > target:
                hi = mid
            else:
                lo = mid
        return 0.5 * (lo + hi)

    if successes == 0:
        low = 0.0
    else:
        # P(X >= k | p) increases in p; find p with tail = alpha/2
        low = solve(lambda p: _log_binom_tail_upper(successes, n, p), alpha / 2.0, 0.0, 1.0)
    if successes == n:
        high = 1.0
    else:
        # P(X <= k | p) decreases in p
        high = solve(lambda p: 1.0 - _binom_tail_lower(successes, n, p), 1.0 - alpha / 2.0,
                     0.0, 1.0)
    return low, high


def permutation_test(outcomes_a, outcomes_b, n_permutations: int = 10000,
                     seed: int = 0) -> float:
    """Two-sided permutation p-value for a difference in means."""
    a = np.asarray(outcomes_a, dtype=np.float64)
    b = np.asarray(outcomes_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise StatsError("both groups must be non-empty")
    observed = abs(a.mean() - b.mean())
    pooled = np.concatenate([a, b])
    na = a.size
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_permutations):
        perm = rng.permutation(pooled.size)
        pa = pooled[perm[:na]]
        pb = pooled[perm[na:]]
        if abs(pa.mean() - pb.mean()) >= observed - 1e-12:
            hits += 1
    return (hits + 1) / (n_permutations + 1)


def cluster_bootstrap(outcomes, cluster_labels, n_resamples: int = 2000,
                      seed: int = 0, level: float = 0.95) -> tuple[float, float, float]:
    """Percentile CI of the mean outcome under resampling whole clusters with
    replacement; returns (estimate, low, high)."""
    y = np.asarray(outcomes, dtype=np.float64)
    labels = np.asarray(cluster_labels)
    if y.size != labels.size:
        raise StatsError("outcomes and cluster labels must align")
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise StatsError("cluster bootstrap needs at least 2 clusters")
    groups = [y[labels == c] for c in clusters]
    sums = np.array([g.sum() for g in groups])
    sizes = np.array([g.size for g in groups])
    rng = np.random.default_rng(seed)
    means = np.empty(n_resamples)
    k = clusters.size
    for r in range(n_resamples):
        pick = rng.integers(0, k, size=k)
        means[r] = sums[pick].sum() / sizes[pick].sum()
    alpha = 1.0 - level
    lo, hi = np.percentile(means, [100 * alpha / 2.0, 100 * (1.0 - alpha / 2.0)])
    return float(y.mean()), float(lo), float(hi)


def iid_bootstrap(outcomes, n_resamples: int = 2000, seed: int = 0,
                  level: float = 0.95) -> tuple[float, float, float]:
    """Plain bootstrap CI, used as a reference for the clustered version."""
    y = np.asarray(outcomes, dtype=np.float64)
    if y.size == 0:
        raise StatsError("empty outcome vector")
    rng = np.random.default_rng(seed)
    means = np.empty(n_resamples)
    for r in range(n_resamples):
        means[r] = y[rng.integers(0, y.size, size=y.size)].mean()
    alpha = 1.0 - level
    lo, hi = np.percentile(means, [100 * alpha / 2.0, 100 * (1.0 - alpha / 2.0)])
    return float(y.mean()), float(lo), float(hi)
