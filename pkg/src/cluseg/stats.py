"""Paired-sample statistics: Wilcoxon signed-rank, Holm-Bonferroni,
Spearman correlation, and Bland-Altman agreement.

The Wilcoxon and Spearman tests use exact null distributions for small
samples (sign enumeration up to n=25, rank permutations up to n=9) and
standard approximations beyond, so small-cohort p-values carry no
approximation error.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata, t as t_dist

__all__ = [
    "WilcoxonResult",
    "BlandAltman",
    "wilcoxon_signed_rank",
    "holm_bonferroni",
    "spearman",
    "bland_altman",
    "WILCOXON_EXACT_MAX_N",
    "SPEARMAN_EXACT_MAX_N",
]

WILCOXON_EXACT_MAX_N = 25
SPEARMAN_EXACT_MAX_N = 9

# slack when counting permutation statistics at least as extreme as the
# observed one, so float rounding cannot flip a tie
_PERM_TOL = 1e-8


class WilcoxonResult(NamedTuple):
    statistic: float  # min(W+, W-)
    pvalue: float
    n_used: int  # pairs remaining after dropping zero differences


def _paired_arrays(a: Sequence[float], b: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or len(x) != len(y):
        raise ValueError("paired samples must be equal-length 1D sequences")
    if len(x) < 1:
        raise ValueError("paired samples must have length >= 1")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("paired samples contain non-finite values")
    return x, y


def _signed_rank_distribution(double_ranks: np.ndarray) -> np.ndarray:
    """Exact counts of 2*W+ over all sign assignments, by subset-sum DP."""
    total = int(double_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in double_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float], alternative: str = "two-sided"
) -> WilcoxonResult:
    """Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped (classic convention); if none remain the
    sample is degenerate and a ValueError is raised. For n <= 25 the p-value
    comes from the exact null distribution over all 2^n sign assignments of
    the observed absolute-difference ranks; beyond that a normal
    approximation with tie and continuity corrections is used.

    alternative is relative to d = a - b: "greater" tests whether a tends
    to exceed b, "less" the reverse.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative: {alternative}")
    x, y = _paired_arrays(a, b)
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("degenerate sample: all paired differences are zero")
    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    total = n * (n + 1) / 2.0
    w_minus = total - w_plus
    statistic = min(w_plus, w_minus)

    if n <= WILCOXON_EXACT_MAX_N:
        double_ranks = np.rint(2.0 * ranks).astype(np.int64)
        counts = _signed_rank_distribution(double_ranks)
        denom = float(2**n)
        w2 = int(round(2.0 * w_plus))
        if alternative == "greater":
            p = counts[w2:].sum() / denom
        elif alternative == "less":
            p = counts[: w2 + 1].sum() / denom
        else:
            lo = int(round(2.0 * min(w_plus, w_minus)))
            hi = int(round(2.0 * max(w_plus, w_minus)))
            p = (counts[: lo + 1].sum() + counts[hi:].sum()) / denom
        return WilcoxonResult(statistic, float(min(p, 1.0)), n)

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    sd = math.sqrt(var)

    def upper(z: float) -> float:
        return 0.5 * math.erfc(z / math.sqrt(2.0))

    if alternative == "greater":
        p = upper((w_plus - mean - 0.5) / sd)
    elif alternative == "less":
        p = 1.0 - upper((w_plus - mean + 0.5) / sd)
    else:
        dev = w_plus - mean
        z = (dev - 0.5 * math.copysign(1.0, dev)) / sd if dev != 0 else 0.0
        p = 2.0 * upper(abs(z))
    return WilcoxonResult(statistic, float(min(max(p, 0.0), 1.0)), n)


def holm_bonferroni(pvals: Sequence[float]) -> list[float]:
    """Step-down Holm-Bonferroni adjustment, monotone and clipped at 1."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("pvals must be a non-empty 1D sequence")
    if (p < 0).any() or (p > 1).any() or not np.isfinite(p).all():
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m, dtype=np.float64)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, (m - rank) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted.tolist()


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman rank correlation with average-rank ties.

    The two-sided p-value is exact (full permutation enumeration) for
    n <= 9 and uses the t approximation with n - 2 degrees of freedom
    otherwise. Constant input has no defined correlation and raises.
    """
    xa, ya = _paired_arrays(x, y)
    n = len(xa)
    if n < 3:
        raise ValueError("spearman requires at least 3 pairs")
    rx = rankdata(xa, method="average")
    ry = rankdata(ya, method="average")
    cx = rx - rx.mean()
    cy = ry - ry.mean()
    denom = math.sqrt(float((cx**2).sum()) * float((cy**2).sum()))
    if denom == 0.0:
        raise ValueError("undefined correlation: constant input")
    rho = float((cx * cy).sum() / denom)

    if n <= SPEARMAN_EXACT_MAX_N:
        perms = np.array(list(itertools.permutations(ry)), dtype=np.float64)
        cperm = perms - ry.mean()
        rhos = (cperm @ cx) / denom
        count = int((np.abs(rhos) >= abs(rho) - _PERM_TOL).sum())
        return rho, count / len(perms)

    if abs(rho) >= 1.0:
        return rho, 0.0
    t_stat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * t_dist.sf(abs(t_stat), df=n - 2))
    return rho, min(p, 1.0)


@dataclass(frozen=True)
class BlandAltman:
    """Agreement between paired measurements: bias and 95% limits of agreement.

    spearman_rho/spearman_p relate per-pair means to differences
    (proportional-bias check) and are None when the correlation is
    undefined, e.g. identical series.
    """

    bias: float
    sd: float
    loa_lower: float
    loa_upper: float
    spearman_rho: float | None
    spearman_p: float | None
    n: int

    def __post_init__(self):
        if not (self.loa_lower <= self.bias <= self.loa_upper):
            raise ValueError("limits of agreement must bracket the bias")


def bland_altman(pred_counts: Sequence[float], ref_counts: Sequence[float]) -> BlandAltman:
    """Bland-Altman analysis of predicted vs reference counts.

    Differences are pred - ref; limits of agreement are bias +/- 1.96
    sample standard deviations of the differences.
    """
    pred, ref = _paired_arrays(pred_counts, ref_counts)
    if len(pred) < 2:
        raise ValueError("bland_altman requires at least 2 pairs")
    diffs = pred - ref
    means = (pred + ref) / 2.0
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    try:
        rho, p = spearman(means, diffs)
    except ValueError:
        rho, p = None, None
    return BlandAltman(
        bias=bias,
        sd=sd,
        loa_lower=bias - 1.96 * sd,
        loa_upper=bias + 1.96 * sd,
        spearman_rho=rho,
        spearman_p=p,
        n=len(pred),
    )
