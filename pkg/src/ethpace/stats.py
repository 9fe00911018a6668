"""Self-contained statistics kernel.

Implements the rank statistics, effect sizes, least squares, and the
non-parametric Scott-Knott ranking used across the pipeline. Everything is
pure and operates on immutable inputs, so the functions are safe to call
concurrently.

Conventions shared by the whole package:

* medians (and every other quantile) use linear interpolation,
* standard deviations are population standard deviations (divide by n),
* Cliff's delta magnitudes follow the Romano thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EffectSize",
    "RankTable",
    "ConstantInputError",
    "SingularDesignError",
    "quantile",
    "median",
    "rankdata",
    "spearman_rho",
    "mann_whitney",
    "cliffs_delta",
    "ols_r2",
    "r_squared",
    "adjusted_r2",
    "scott_knott",
]

# Romano et al. magnitude thresholds for |Cliff's delta|.
NEGLIGIBLE_DELTA = 0.147
SMALL_DELTA = 0.33
MEDIUM_DELTA = 0.474

# Largest per-side sample size for which the exact Mann-Whitney null
# distribution is enumerated (ties always fall back to the normal
# approximation, as is standard practice).
EXACT_MW_LIMIT = 20


class ConstantInputError(ValueError):
    """Correlation requested on a vector with zero variance."""


class SingularDesignError(ValueError):
    """OLS design matrix is rank deficient."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"singular design: dependent columns {self.columns}")


@dataclass(frozen=True)
class EffectSize:
    """Cliff's delta together with its Romano magnitude label."""

    delta: float
    magnitude: str

    @staticmethod
    def from_delta(delta: float) -> "EffectSize":
        a = abs(delta)
        if a <= NEGLIGIBLE_DELTA:
            mag = "negligible"
        elif a <= SMALL_DELTA:
            mag = "small"
        elif a <= MEDIUM_DELTA:
            mag = "medium"
        else:
            mag = "large"
        return EffectSize(float(delta), mag)


@dataclass
class RankTable:
    """Ordered ranking produced by Scott-Knott.

    ``groups[k]`` holds the item names sharing rank ``k + 1`` (rank 1 has the
    highest values). ``medians`` records the median of each item's ranked
    distribution; the ranking statistic is always the median.
    """

    groups: list[list[str]] = field(default_factory=list)
    medians: dict[str, float] = field(default_factory=dict)

    def rank_of(self, name: str) -> int:
        for k, members in enumerate(self.groups):
            if name in members:
                return k + 1
        raise KeyError(name)

    def as_rows(self) -> list[tuple[int, str, float]]:
        rows = []
        for k, members in enumerate(self.groups):
            for name in members:
                rows.append((k + 1, name, self.medians[name]))
        return rows


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile (the single definition used everywhere)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("quantile of empty sequence")
    return float(np.quantile(arr, q))


def median(values) -> float:
    return quantile(values, 0.5)


def rankdata(values) -> np.ndarray:
    """Average ranks (1-based); ties share the mean of their rank span."""
    arr = np.asarray(values, dtype=float)
    _, inverse, counts = np.unique(arr, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    avg = (starts + ends + 1) / 2.0  # mean of ranks starts+1 .. ends
    return avg[inverse]


def spearman_rho(x, y) -> float:
    """Spearman's rank correlation: Pearson correlation of average-tied ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 2:
        raise ValueError("spearman_rho needs two equal-length vectors of size >= 2")
    rx = rankdata(x)
    ry = rankdata(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise ConstantInputError("correlation undefined for a constant vector")
    return float(rx @ ry) / denom


def _exact_u_cdf(u: float, m: int, n: int) -> float:
    """P(U <= u) under the tie-free null, by enumerating the U distribution.

    Uses the recurrence f(i, j, u) = f(i-1, j, u-j) + f(i, j-1, u), obtained
    by conditioning on whether the largest observation belongs to the first
    sample (beating all j of the second) or to the second.
    """
    max_u = m * n
    # table[j, u] = f(i, j, u) for the current i
    table = np.zeros((n + 1, max_u + 1), dtype=float)
    table[:, 0] = 1.0  # f(0, j, 0) = 1
    for _i in range(1, m + 1):
        new = np.zeros_like(table)
        new[0, 0] = 1.0  # f(i, 0, 0) = 1
        for j in range(1, n + 1):
            new[j, j:] = table[j, : max_u + 1 - j]  # f(i-1, j, u-j)
            new[j, :] += new[j - 1, :]  # f(i, j-1, u)
        table = new
    counts = table[n]
    total = counts.sum()
    k = int(math.floor(u + 1e-12))
    k = min(max(k, -1), max_u)
    if k < 0:
        return 0.0
    return float(counts[: k + 1].sum() / total)


def mann_whitney(a, b, two_tailed: bool = True) -> tuple[float, float]:
    """Mann-Whitney U test. Returns (U of the first sample, p-value).

    U comes from rank sums with tie handling. The p-value is exact (full
    enumeration of the null distribution) when both samples have at most
    EXACT_MW_LIMIT observations and no ties are present; otherwise the normal
    approximation with tie correction and continuity correction is used.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = a.size, b.size
    if m < 1 or n < 1:
        raise ValueError("mann_whitney needs non-empty samples")
    combined = np.concatenate([a, b])
    ranks = rankdata(combined)
    r_a = float(ranks[:m].sum())
    u_a = r_a - m * (m + 1) / 2.0

    _, tie_counts = np.unique(combined, return_counts=True)
    has_ties = bool((tie_counts > 1).any())

    if not has_ties and m <= EXACT_MW_LIMIT and n <= EXACT_MW_LIMIT:
        u_low = min(u_a, m * n - u_a)
        p = 2.0 * _exact_u_cdf(u_low, m, n)
        if not two_tailed:
            p = _exact_u_cdf(u_low, m, n)
        return float(u_a), float(min(1.0, p))

    mu = m * n / 2.0
    nn = m + n
    tie_term = float(((tie_counts**3) - tie_counts).sum()) / (nn * (nn - 1.0)) if nn > 1 else 0.0
    sigma_sq = (m * n / 12.0) * ((nn + 1.0) - tie_term)
    if sigma_sq <= 0.0:
        return float(u_a), 1.0
    z = (abs(u_a - mu) - 0.5) / math.sqrt(sigma_sq)
    z = max(z, 0.0)
    p = math.erfc(z / math.sqrt(2.0))
    if not two_tailed:
        p = p / 2.0
    return float(u_a), float(min(1.0, p))


def cliffs_delta(a, b) -> EffectSize:
    """Cliff's delta d = (#{a_i > b_j} - #{a_i < b_j}) / (|a| |b|).

    Computed by ranking one sample against the sorted other, so the cost is
    O((|a| + |b|) log(|a| + |b|)) rather than quadratic.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 1 or b.size < 1:
        raise ValueError("cliffs_delta needs non-empty samples")
    sb = np.sort(b)
    greater = np.searchsorted(sb, a, side="left")
    less = b.size - np.searchsorted(sb, a, side="right")
    d = float((greater - less).sum()) / (a.size * b.size)
    return EffectSize.from_delta(d)


def _rank_of_columns(a: np.ndarray) -> int:
    return int(np.linalg.matrix_rank(a))


def ols_r2(y, x) -> tuple[np.ndarray, float]:
    """Least squares with intercept. Returns (coefficients, R^2).

    Coefficients are ordered (intercept, per-column slopes). Rank-deficient
    designs raise SingularDesignError naming the removable columns.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if y.size != n:
        raise ValueError("y and X row counts differ")
    if n < p + 2:
        raise ValueError(f"need at least {p + 2} rows for {p} features, got {n}")
    design = np.column_stack([np.ones(n), x])
    full_rank = design.shape[1]
    if _rank_of_columns(design) < full_rank:
        dependent = []
        base_rank = _rank_of_columns(design)
        for j in range(1, full_rank):
            reduced = np.delete(design, j, axis=1)
            if _rank_of_columns(reduced) == base_rank:
                dependent.append(j - 1)
        raise SingularDesignError(dependent)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_res = float(resid @ resid)
    centered = y - y.mean()
    ss_tot = float(centered @ centered)
    if ss_tot == 0.0:
        raise ConstantInputError("R^2 undefined for a constant target")
    return coef, 1.0 - ss_res / ss_tot


def r_squared(y_true, y_pred) -> float:
    """Plain coefficient of determination for predictions."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    resid = y_true - y_pred
    ss_res = float(resid @ resid)
    centered = y_true - y_true.mean()
    ss_tot = float(centered @ centered)
    if ss_tot == 0.0:
        raise ConstantInputError("R^2 undefined for a constant target")
    return 1.0 - ss_res / ss_tot


def adjusted_r2(r2: float, n_samples: int, n_features: int) -> float:
    """1 - (1 - R^2)(n - 1) / (n - p - 1)."""
    if n_samples <= n_features + 1:
        raise ValueError("adjusted_r2 requires n_samples > n_features + 1")
    return 1.0 - (1.0 - r2) * (n_samples - 1) / (n_samples - n_features - 1)


def _best_cut(pooled: list[np.ndarray]) -> int | None:
    """Cut index maximizing the size-weighted separation of part medians."""
    total = np.concatenate(pooled)
    med_all = median(total)
    best_k, best_score = None, -math.inf
    for k in range(1, len(pooled)):
        left = np.concatenate(pooled[:k])
        right = np.concatenate(pooled[k:])
        score = left.size * (median(left) - med_all) ** 2 + right.size * (median(right) - med_all) ** 2
        if score > best_score:
            best_score = score
            best_k = k
    return best_k


def scott_knott(groups: dict, alpha: float = 0.05) -> RankTable:
    """Scott-Knott ranking with non-parametric gates.

    Groups are ordered by median (descending) and recursively split at the
    cut that maximizes the separation of part medians; a split is accepted
    only when the two parts differ significantly (two-tailed Mann-Whitney at
    ``alpha``) with a non-negligible Cliff's delta. Unsplit segments share a
    rank, numbered from 1 at the highest-median segment.
    """
    if not groups:
        raise ValueError("scott_knott needs at least one group")
    arrays = {name: np.asarray(vals, dtype=float) for name, vals in groups.items()}
    for name, arr in arrays.items():
        if arr.size == 0:
            raise ValueError(f"group {name!r} is empty")
    medians = {name: median(arr) for name, arr in arrays.items()}
    ordered = sorted(arrays, key=lambda name: (-medians[name], name))

    leaves: list[list[str]] = []

    def recurse(names: list[str]) -> None:
        if len(names) == 1:
            leaves.append(names)
            return
        pooled = [arrays[n] for n in names]
        k = _best_cut(pooled)
        left = np.concatenate(pooled[:k])
        right = np.concatenate(pooled[k:])
        _, p = mann_whitney(left, right, two_tailed=True)
        effect = cliffs_delta(left, right)
        if p <= alpha and abs(effect.delta) > NEGLIGIBLE_DELTA:
            recurse(names[:k])
            recurse(names[k:])
        else:
            leaves.append(names)

    recurse(ordered)
    return RankTable(groups=leaves, medians=medians)
