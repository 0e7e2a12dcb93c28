"""Small statistics helpers shared by the experiment modules."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats


def wilson_interval(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1 or not 0 <= successes <= n:
        raise ValueError(f"need 0 <= successes <= n and n >= 1, got {successes}/{n}")
    z = float(stats.norm.ppf(0.5 + level / 2))
    p = successes / n
    z2n = z * z / n
    centre = (p + z2n / 2) / (1 + z2n)
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z2n)
    lo, hi = max(0.0, centre - half), min(1.0, centre + half)
    if successes == 0:
        lo = 0.0
    if successes == n:
        hi = 1.0
    return lo, hi


def ks_normal(sample, scale: float = 1.0) -> float:
    """KS distance of ``sample`` to N(0, scale^2)."""
    return float(stats.kstest(np.asarray(sample) / scale, "norm").statistic)


def ks_two_sample(a, b) -> float:
    return float(stats.ks_2samp(np.asarray(a), np.asarray(b)).statistic)


def mean_and_error(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
