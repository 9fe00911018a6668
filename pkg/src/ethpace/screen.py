"""Feature screening: log transform, correlation filtering, redundancy removal.

The correlation step clusters features by average-linkage on |Spearman rho|
and then, inside each cluster, repeatedly drops the lower-priority member of
the most correlated remaining pair until no within-cluster pair exceeds the
threshold. The redundancy step repeatedly removes the feature best explained
by the survivors (OLS R^2), stopping early if a removal would leave an
already-removed feature under-explained.

Screening decisions must be computed on training rows only and then applied
unchanged everywhere; the orchestrator takes the decision rows explicitly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import stats
from .features import LOG_EXEMPT, FeatureMatrix

DEFAULT_RHO_THRESHOLD = 0.7
DEFAULT_R2_THRESHOLD = 0.9
RIDGE_JITTER = 1e-8

# Default keep/drop directions for correlated pairs: (dropped, kept). The
# priority list below is any topological order of these preferences; ties are
# broken alphabetically. Pairs that never exceed the threshold are unaffected.
DEFAULT_DROP_DIRECTIONS: tuple[tuple[str, str], ...] = (
    ("num_same_120", "avg_num_same_120"),
    ("avg_difficulty_120", "med_difficulty_120"),
    ("med_num_above_120", "num_above_120"),
    ("num_below_120", "avg_num_below_120"),
    ("avg_num_above_120", "med_num_above_120"),
    ("avg_num_below_120", "med_num_below_120"),
    ("total_txs_120", "avg_txs_120"),
    ("difficulty_1", "med_difficulty_120"),
    ("avg_func_gas_usage_120", "med_func_gas_usage_120"),
    ("avg_txs_120", "med_txs_120"),
    ("avg_num_same_120", "std_num_same_120"),
    ("avg_pending_pool_120", "med_pending_pool_120"),
    ("avg_gas_price_1", "med_gas_price_1"),
    ("avg_gas_price_120", "med_gas_price_120"),
    ("med_num_above_120", "med_num_below_120"),
    ("med_gas_price_120", "med_gas_price_1"),
    ("pending_pool", "med_pending_pool_120"),
    ("med_gas_price_120", "gas_price_gwei"),
    ("input_length", "to_contract"),
    ("to_contract", "contract_bytecode_length"),
    ("avg_gas_price_gwei_prev_day", "med_gas_price_120"),
    ("past_avg_time", "past_std_time"),
    ("med_func_gas_usage_120", "std_func_gas_usage_120"),
    ("contract_bytecode_length", "std_func_gas_usage_120"),
    ("num_same_1", "pct_same_1"),
    ("pct_above_120", "med_pct_above_120"),
    ("avg_pct_above_120", "med_pct_above_120"),
    ("pct_below_120", "avg_pct_below_120"),
    ("avg_pct_below_120", "med_pct_below_120"),
    ("med_num_same_120", "med_pct_same_120"),
    ("pct_same_120", "avg_pct_same_120"),
    ("med_pct_above_120", "med_pct_below_120"),
    ("std_num_same_120", "std_pct_same_120"),
    ("med_num_below_120", "med_pct_below_120"),
    ("std_pct_above_120", "std_pct_below_120"),
    ("avg_pct_same_120", "std_pct_same_120"),
    ("num_above_1", "pct_above_1"),
    ("num_below_1", "pct_below_1"),
    ("std_num_above_120", "std_pct_below_120"),
    ("pct_above_1", "pct_below_1"),
    ("pct_below_1", "med_pct_below_120"),
    ("num_pending", "med_pend_prices"),
    ("avg_pend_prices", "med_pend_prices"),
    ("std_pend_prices", "med_pend_prices"),
)


class ScreenError(ValueError):
    pass


class TransformError(ScreenError):
    pass


def _topological_priority(directions) -> list[str]:
    """Kahn's algorithm over kept-over-dropped preferences, highest first."""
    nodes = set()
    succ: dict[str, set[str]] = {}
    indeg: dict[str, int] = {}
    for dropped, kept in directions:
        nodes.update((dropped, kept))
    for n in nodes:
        succ[n] = set()
        indeg[n] = 0
    for dropped, kept in directions:
        if dropped not in succ[kept]:
            succ[kept].add(dropped)
            indeg[dropped] += 1
    ready = sorted(n for n in nodes if indeg[n] == 0)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in sorted(succ[n]):
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
        ready.sort()
    if len(order) != len(nodes):
        raise ScreenError("keep/drop direction table contains a cycle")
    return order


DEFAULT_KEEP_PRIORITY: tuple[str, ...] = tuple(_topological_priority(DEFAULT_DROP_DIRECTIONS))


@dataclass
class ScreenReport:
    removed_constant: list[str] = field(default_factory=list)
    removed_by_correlation: list[tuple[str, str, float]] = field(default_factory=list)
    removed_by_redundancy: list[tuple[str, float]] = field(default_factory=list)
    surviving: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    stopped_by: tuple[str, str] | None = None  # (blocked removal, under-explained feature)

    def removed(self) -> list[str]:
        out = list(self.removed_constant)
        out.extend(r for r, _, _ in self.removed_by_correlation)
        out.extend(r for r, _ in self.removed_by_redundancy)
        return out

    def to_dict(self) -> dict:
        return {
            "removed_constant": self.removed_constant,
            "removed_by_correlation": [
                {"removed": r, "kept": k, "rho": rho} for r, k, rho in self.removed_by_correlation
            ],
            "removed_by_redundancy": [{"removed": r, "r2": r2} for r, r2 in self.removed_by_redundancy],
            "surviving": self.surviving,
            "notes": self.notes,
            "stopped_by": list(self.stopped_by) if self.stopped_by else None,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def log1p_transform(matrix: FeatureMatrix) -> FeatureMatrix:
    """log(x + 1) on every numeric column and the target.

    Flag and label-encoded columns (to_contract, is_erc20, is_erc721, day,
    hour, gas_price_cat_enc) are left untouched. Negative cells are refused.
    """
    if matrix.log_transformed:
        raise TransformError("matrix is already log-transformed")
    values = matrix.values.copy()
    for j, name in enumerate(matrix.columns):
        if name in LOG_EXEMPT:
            continue
        col = values[:, j]
        bad = np.flatnonzero(col < 0)
        if bad.size:
            raise TransformError(f"negative cell at row {bad[0]}, column {name!r}")
        values[:, j] = np.log1p(col)
    if np.any(matrix.target < 0):
        bad = int(np.flatnonzero(matrix.target < 0)[0])
        raise TransformError(f"negative cell at row {bad}, column 'processing_time_minutes'")
    return FeatureMatrix(
        tx_hashes=matrix.tx_hashes,
        columns=list(matrix.columns),
        values=values,
        target=np.log1p(matrix.target),
        dimensions=dict(matrix.dimensions),
        days=matrix.days,
        log_transformed=True,
        first_day=matrix.first_day,
        excluded=matrix.excluded,
    )


def _spearman_matrix(values: np.ndarray) -> np.ndarray:
    ranks = np.column_stack([stats.rankdata(values[:, j]) for j in range(values.shape[1])])
    return np.corrcoef(ranks, rowvar=False)


def _priority_key(name: str, keep_priority: list[str], column_order: dict[str, int]):
    if name in keep_priority:
        return (1, -keep_priority.index(name))
    return (0, -column_order[name])


def correlation_filter(
    matrix: FeatureMatrix,
    threshold: float = DEFAULT_RHO_THRESHOLD,
    keep_priority=None,
    rows=None,
) -> ScreenReport:
    """Cluster-guided removal of correlated features.

    ``rows`` restricts the correlation estimates (e.g. to the training
    partition); the decision applies to the whole matrix.
    """
    if not 0.0 < threshold < 1.0:
        raise ScreenError("threshold must be in (0, 1)")
    if matrix.n_features < 2:
        raise ScreenError("need at least two features")
    keep_priority = list(DEFAULT_KEEP_PRIORITY if keep_priority is None else keep_priority)
    report = ScreenReport()
    values = matrix.values if rows is None else matrix.values[np.asarray(rows)]
    names = list(matrix.columns)
    column_order = {n: j for j, n in enumerate(names)}

    live = []
    for name in names:
        col = values[:, column_order[name]]
        if col.size == 0 or np.all(col == col[0]):
            report.removed_constant.append(name)
            report.notes.append(f"{name}: constant column, correlation undefined")
        else:
            live.append(name)

    if len(live) >= 2:
        idx = [column_order[n] for n in live]
        rho = _spearman_matrix(values[:, idx])
        abs_rho = np.abs(rho)
        np.fill_diagonal(abs_rho, 1.0)

        dist = 1.0 - abs_rho
        condensed = dist[np.triu_indices(len(live), k=1)]
        z = linkage(condensed, method="average")
        labels = fcluster(z, t=1.0 - threshold, criterion="distance")

        alive = set(live)
        for cluster_id in sorted(set(labels)):
            members = [live[i] for i in range(len(live)) if labels[i] == cluster_id]
            if len(members) < 2:
                continue
            while True:
                pairs = []
                for ai in range(len(members)):
                    for bi in range(ai + 1, len(members)):
                        a, b = members[ai], members[bi]
                        if a in alive and b in alive:
                            r = abs_rho[live.index(a), live.index(b)]
                            if r > threshold:
                                pairs.append((r, a, b))
                if not pairs:
                    break
                pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
                _, a, b = pairs[0]
                ka = _priority_key(a, keep_priority, column_order)
                kb = _priority_key(b, keep_priority, column_order)
                drop, keep = (a, b) if ka < kb else (b, a)
                signed = rho[live.index(drop), live.index(keep)]
                report.removed_by_correlation.append((drop, keep, float(signed)))
                alive.discard(drop)
        report.surviving = [n for n in live if n in alive]
    else:
        report.surviving = list(live)
    return report


def _gram_r2(gram: np.ndarray, j: int, notes: list[str], name: str) -> float:
    """R^2 of column j regressed on the remaining columns, from the Gram
    matrix of [1 | X]. Column j in the Gram indexing is j + 1."""
    others = [k for k in range(gram.shape[0]) if k != j + 1]
    a = gram[np.ix_(others, others)]
    bvec = gram[others, j + 1]
    try:
        coef = np.linalg.solve(a, bvec)
    except np.linalg.LinAlgError:
        coef = np.linalg.solve(a + RIDGE_JITTER * np.eye(a.shape[0]), bvec)
        notes.append(f"{name}: singular design, ridge jitter {RIDGE_JITTER:g} applied")
    sjj = gram[j + 1, j + 1]
    n = gram[0, 0]
    mean = gram[0, j + 1] / n
    ss_tot = sjj - n * mean * mean
    if ss_tot <= 0:
        return 1.0
    ss_res = sjj - coef @ bvec
    return float(1.0 - max(ss_res, 0.0) / ss_tot)


def redundancy_filter(
    matrix: FeatureMatrix,
    r2_threshold: float = DEFAULT_R2_THRESHOLD,
    rows=None,
) -> ScreenReport:
    """Stepwise removal of features explainable from the others by OLS."""
    if not 0.0 < r2_threshold < 1.0:
        raise ScreenError("r2_threshold must be in (0, 1)")
    report = ScreenReport()
    values = matrix.values if rows is None else matrix.values[np.asarray(rows)]
    names = list(matrix.columns)

    alive = list(range(len(names)))
    removed: list[int] = []

    def r2_of(target_j: int, predictor_js: list[int]) -> float:
        cols = [values[:, j] for j in predictor_js]
        design = np.column_stack([np.ones(values.shape[0])] + cols)
        gram = design.T @ design
        y = values[:, target_j]
        b = design.T @ y
        try:
            coef = np.linalg.solve(gram, b)
        except np.linalg.LinAlgError:
            coef = np.linalg.solve(gram + RIDGE_JITTER * np.eye(gram.shape[0]), b)
            report.notes.append(f"{names[target_j]}: singular design, ridge jitter {RIDGE_JITTER:g} applied")
        resid = y - design @ coef
        centered = y - y.mean()
        ss_tot = float(centered @ centered)
        if ss_tot <= 0:
            return 1.0
        return float(1.0 - max(float(resid @ resid), 0.0) / ss_tot)

    while len(alive) >= 2:
        scores = []
        for j in alive:
            others = [k for k in alive if k != j]
            scores.append((r2_of(j, others), j))
        # ties favor dropping the latest column: raw features precede derived
        # ones in the registry order
        scores.sort(key=lambda s: (-s[0], -s[1]))
        best_r2, best_j = scores[0]
        if best_r2 <= r2_threshold:
            break
        survivors_after = [k for k in alive if k != best_j]
        blocked = None
        for gone in removed:
            if r2_of(gone, survivors_after) < r2_threshold:
                blocked = names[gone]
                break
        if blocked is not None:
            report.stopped_by = (names[best_j], blocked)
            report.notes.append(
                f"stopped: removing {names[best_j]} would leave {blocked} explained below {r2_threshold}"
            )
            break
        report.removed_by_redundancy.append((names[best_j], float(best_r2)))
        removed.append(best_j)
        alive.remove(best_j)

    report.surviving = [names[j] for j in alive]
    return report


def screen_matrix(
    matrix: FeatureMatrix,
    rho_threshold: float = DEFAULT_RHO_THRESHOLD,
    r2_threshold: float = DEFAULT_R2_THRESHOLD,
    keep_priority=None,
    decision_rows=None,
) -> tuple[FeatureMatrix, ScreenReport]:
    """Correlation filter then redundancy filter, as one report.

    ``decision_rows`` restricts both filters' estimates (training partition);
    the returned matrix keeps every row with only the surviving columns.
    """
    corr = correlation_filter(matrix, rho_threshold, keep_priority, rows=decision_rows)
    reduced = matrix.select_columns(corr.surviving)
    redun = redundancy_filter(reduced, r2_threshold, rows=decision_rows)
    merged = ScreenReport(
        removed_constant=corr.removed_constant,
        removed_by_correlation=corr.removed_by_correlation,
        removed_by_redundancy=redun.removed_by_redundancy,
        surviving=redun.surviving,
        notes=corr.notes + redun.notes,
        stopped_by=redun.stopped_by,
    )
    screened = matrix.select_columns(redun.surviving)
    screened.excluded = matrix.excluded
    return screened, merged
