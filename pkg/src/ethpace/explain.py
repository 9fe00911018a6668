"""Model interpretation: exact TreeSHAP, Scott-Knott feature ranking, partial
dependence, pairwise interaction values, waterfall decompositions, and
feature-group ablations.

SHAP here is path-dependent: conditional expectations walk the stored
training covers, so the background distribution is the training sample each
tree actually saw. Additivity (base value plus contributions equals the
prediction) is an invariant, not an approximation.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import stats
from ._shap import tree_expectation_subset, tree_shap_rows
from .features import LOG_EXEMPT, FeatureMatrix
from .forest import EvalReport, RandomForest, SearchSpace, SplitProtocol, run_protocol
from .seeding import rng_for

EXACT_INTERACTION_LIMIT = 15


class ModelIntegrityError(RuntimeError):
    pass


class ExplainError(ValueError):
    pass


@dataclass
class ShapExplanation:
    feature_names: list[str]
    base_value: float
    phi: np.ndarray
    prediction: float

    def additivity_gap(self) -> float:
        return abs(self.base_value + float(self.phi.sum()) - self.prediction)

    def to_dict(self) -> dict:
        return {
            "base_value": self.base_value,
            "prediction": self.prediction,
            "phi": {n: float(v) for n, v in zip(self.feature_names, self.phi)},
        }


@dataclass
class PdpCurve:
    feature: str
    grid: np.ndarray
    mean_prediction: np.ndarray
    deciles: np.ndarray
    back_transformed: bool
    constant: bool = False

    def non_increasing_violations(self, lo: float | None = None, hi: float | None = None) -> int:
        """Number of upward steps on the curve restricted to [lo, hi].

        Callers pass feature-distribution percentiles (reported scale) to
        ignore the sparse tails; defaults cover the whole grid.
        """
        if self.grid.size < 2:
            return 0
        lo = -np.inf if lo is None else lo
        hi = np.inf if hi is None else hi
        mask = (self.grid >= lo) & (self.grid <= hi)
        y = self.mean_prediction[mask]
        return int(np.sum(np.diff(y) > 1e-12))


@dataclass
class InteractionMatrix:
    feature_names: list[str]
    values: np.ndarray  # (M, M), diagonal = main effects
    phi: np.ndarray
    base_value: float
    prediction: float
    standard_error: np.ndarray | None = None  # sampled mode only

    def pair(self, a: str, b: str) -> float:
        i = self.feature_names.index(a)
        j = self.feature_names.index(b)
        return float(self.values[i, j])


@dataclass
class WaterfallEntry:
    feature: str
    phi: float
    aggregated: int = 0  # number of features folded into this entry


@dataclass
class ChunkResult:
    dimension: str
    diffs: np.ndarray  # full adjusted R^2 minus partial, one per bootstrap
    partial_report: EvalReport | None = None

    def median_diff(self) -> float:
        return stats.median(self.diffs)

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "median_diff": self.median_diff(),
            "mean_diff": float(np.mean(self.diffs)),
            "partial_summary": self.partial_report.summary() if self.partial_report else None,
            "diffs": [float(d) for d in self.diffs],
        }


def _validate_forest(forest: RandomForest) -> None:
    for t, tree in enumerate(forest.trees):
        if np.any(tree.cover <= 0):
            raise ModelIntegrityError(f"tree {t} has a node with non-positive cover")


def shap_matrix(
    forest: RandomForest,
    x: np.ndarray,
    condition: int = 0,
    condition_feature: int = -1,
    threads: int = 1,
) -> tuple[float, np.ndarray]:
    """Base value and per-row SHAP matrix (n, M) for raw feature rows.

    Rows are independent, so thread workers own disjoint row blocks; within a
    block trees are visited in order, keeping sums bit-stable for any thread
    count.
    """
    _validate_forest(forest)
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    phi = np.zeros((n, len(forest.feature_names)))
    trees = [(t, t.max_depth()) for t in forest.trees]

    def run_block(lo: int, hi: int) -> None:
        for tree, depth in trees:
            tree_shap_rows(
                tree.children_left, tree.children_right, tree.feature, tree.threshold,
                tree.value, tree.cover, x[lo:hi], phi[lo:hi], depth,
                condition, condition_feature,
            )

    if threads <= 1 or n < 2 * threads:
        run_block(0, n)
    else:
        bounds = np.linspace(0, n, threads + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda k: run_block(bounds[k], bounds[k + 1]), range(threads)))
    phi /= len(forest.trees)
    base = float(np.mean([t.value[0] for t in forest.trees]))
    return base, phi


def tree_shap(forest: RandomForest, row) -> ShapExplanation:
    """Exact SHAP explanation of one row (mapping or array in feature order)."""
    if isinstance(row, dict):
        missing = [n for n in forest.feature_names if n not in row]
        if missing:
            raise ExplainError(f"row is missing feature {missing[0]!r}")
        x = np.array([[float(row[n]) for n in forest.feature_names]])
    else:
        x = np.asarray(row, dtype=np.float64).reshape(1, -1)
        if x.shape[1] != len(forest.feature_names):
            raise ExplainError("row length does not match the forest's features")
    base, phi = shap_matrix(forest, x)
    prediction = float(forest.predict_array(x)[0])
    return ShapExplanation(
        feature_names=list(forest.feature_names),
        base_value=base,
        phi=phi[0],
        prediction=prediction,
    )


def _matrix_in_forest_order(forest: RandomForest, matrix: FeatureMatrix) -> np.ndarray:
    missing = [n for n in forest.feature_names if n not in matrix.columns]
    if missing:
        raise ExplainError(f"matrix is missing feature {missing[0]!r}")
    idx = [matrix.columns.index(n) for n in forest.feature_names]
    return np.ascontiguousarray(matrix.values[:, idx])


def rank_features(
    forest: RandomForest,
    matrix: FeatureMatrix,
    threads: int = 1,
    alpha: float = 0.05,
) -> stats.RankTable:
    """Scott-Knott ranks of the per-feature |SHAP| distributions.

    The ranking statistic reported per feature is the median |SHAP|.
    """
    x = _matrix_in_forest_order(forest, matrix)
    _, phi = shap_matrix(forest, x, threads=threads)
    groups = {name: np.abs(phi[:, j]) for j, name in enumerate(forest.feature_names)}
    return stats.scott_knott(groups, alpha=alpha)


def pdp(
    forest: RandomForest,
    matrix: FeatureMatrix,
    feature: str,
    grid_size: int = 50,
) -> PdpCurve:
    """Partial dependence on the training distribution's quantile grid.

    Each grid point is the mean prediction with the feature overridden for
    every row. When the matrix is log-transformed, both axes are reported
    back on the raw scale via exp(v) - 1 (label-encoded grids stay as-is).
    """
    col = matrix.column(feature)
    x = _matrix_in_forest_order(forest, matrix)
    j = forest.feature_names.index(feature)
    probs = np.linspace(0.0, 1.0, grid_size)
    grid = np.unique(np.quantile(col, probs))
    constant = grid.size == 1
    means = np.empty(grid.size)
    work = x.copy()
    for g, val in enumerate(grid):
        work[:, j] = val
        means[g] = float(np.mean(forest.predict_array(work)))
    deciles = np.quantile(col, np.arange(0.1, 0.91, 0.1))

    back = bool(matrix.log_transformed)
    y = np.expm1(means) if back else means
    if back and feature not in LOG_EXEMPT:
        grid_rep = np.expm1(grid)
        deciles_rep = np.expm1(deciles)
    else:
        grid_rep, deciles_rep = grid, deciles
    return PdpCurve(
        feature=feature,
        grid=grid_rep,
        mean_prediction=y,
        deciles=deciles_rep,
        back_transformed=back,
        constant=constant,
    )


def _subset_value(forest: RandomForest, x: np.ndarray, mask: np.ndarray) -> float:
    total = 0.0
    for tree in forest.trees:
        total += tree_expectation_subset(
            tree.children_left, tree.children_right, tree.feature, tree.threshold,
            tree.value, tree.cover, x, mask,
        )
    return total / len(forest.trees)


def interaction_values(
    forest: RandomForest,
    row,
    mode: str = "auto",
    samples: int = 64,
    seed: int = 0,
) -> InteractionMatrix:
    """Pairwise Shapley interaction values for one row.

    Exact mode runs conditioned TreeSHAP per feature (present vs absent,
    halved difference) and requires at most EXACT_INTERACTION_LIMIT features;
    sampled mode Monte-Carlo averages second differences over permutations
    and reports a standard error. Diagonals hold the main effects, so every
    row sums to the feature's phi exactly.
    """
    m = len(forest.feature_names)
    if mode not in ("auto", "exact", "sampled"):
        raise ExplainError(f"unknown interaction mode {mode!r}")
    if mode == "exact" and m > EXACT_INTERACTION_LIMIT:
        raise ExplainError(
            f"exact interactions limited to {EXACT_INTERACTION_LIMIT} features, got {m}"
        )
    if mode == "auto":
        mode = "exact" if m <= EXACT_INTERACTION_LIMIT else "sampled"

    if isinstance(row, dict):
        x = np.array([float(row[n]) for n in forest.feature_names])
    else:
        x = np.asarray(row, dtype=np.float64).reshape(-1)
    explanation = tree_shap(forest, x)
    phi = explanation.phi

    values = np.zeros((m, m))
    se = None
    if mode == "exact":
        raw = np.zeros((m, m))
        xr = x.reshape(1, -1)
        for i in range(m):
            _, plus = shap_matrix(forest, xr, condition=1, condition_feature=i)
            _, minus = shap_matrix(forest, xr, condition=-1, condition_feature=i)
            raw[i] = (plus[0] - minus[0]) / 2.0
            raw[i, i] = 0.0
        for i in range(m):
            for j in range(i + 1, m):
                v = (raw[i, j] + raw[j, i]) / 2.0
                values[i, j] = values[j, i] = v
    else:
        rng = rng_for(seed, "interaction-samples")
        se = np.zeros((m, m))
        mask = np.zeros(m, dtype=np.bool_)
        for i in range(m):
            for j in range(i + 1, m):
                others = [f for f in range(m) if f != i and f != j]
                deltas = np.empty(samples)
                for s in range(samples):
                    perm = rng.permutation(np.array(others + [i], dtype=np.int64))
                    pos = int(np.flatnonzero(perm == i)[0])
                    mask[:] = False
                    mask[perm[:pos]] = True
                    v00 = _subset_value(forest, x, mask)
                    mask[i] = True
                    v10 = _subset_value(forest, x, mask)
                    mask[j] = True
                    v11 = _subset_value(forest, x, mask)
                    mask[i] = False
                    v01 = _subset_value(forest, x, mask)
                    mask[j] = False
                    deltas[s] = v11 - v10 - v01 + v00
                values[i, j] = values[j, i] = float(np.mean(deltas)) / 2.0
                spread = float(np.std(deltas, ddof=1)) if samples > 1 else 0.0
                se[i, j] = se[j, i] = spread / (2.0 * np.sqrt(samples))

    for i in range(m):
        values[i, i] = phi[i] - (values[i].sum() - values[i, i])
    return InteractionMatrix(
        feature_names=list(forest.feature_names),
        values=values,
        phi=phi,
        base_value=explanation.base_value,
        prediction=explanation.prediction,
        standard_error=se,
    )


def waterfall(explanation: ShapExplanation, top_k: int = 9) -> list[WaterfallEntry]:
    """Top contributors by |phi| plus one residual entry for the rest.

    Entries sum to prediction - base_value exactly: the aggregate absorbs
    the residual.
    """
    order = sorted(
        range(len(explanation.feature_names)),
        key=lambda i: (-abs(float(explanation.phi[i])), explanation.feature_names[i]),
    )
    entries = [
        WaterfallEntry(explanation.feature_names[i], float(explanation.phi[i]))
        for i in order[:top_k]
    ]
    rest = order[top_k:]
    if rest:
        shown = sum(e.phi for e in entries)
        residual = (explanation.prediction - explanation.base_value) - shown
        entries.append(WaterfallEntry("other features", residual, aggregated=len(rest)))
    return entries


def waterfall_to_dict(explanation: ShapExplanation, entries: list[WaterfallEntry]) -> dict:
    return {
        "base_value": explanation.base_value,
        "prediction": explanation.prediction,
        "entries": [
            {"feature": e.feature, "phi": e.phi, "aggregated": e.aggregated} for e in entries
        ],
    }


def chunk_tests(
    matrix: FeatureMatrix,
    dimensions,
    split: SplitProtocol | None = None,
    space: SearchSpace | None = None,
    search_iterations: int = 20,
    seed: int = 0,
    threads: int = 1,
    reduced: bool = False,
) -> tuple[EvalReport, dict[str, ChunkResult]]:
    """Ablate whole feature dimensions and measure the adjusted-R^2 cost.

    The full-matrix protocol runs once and is shared across dimensions; each
    partial model is independently tuned on the same bootstrap draws.
    """
    dims = list(dimensions)
    for dim in dims:
        partial_cols = [c for c in matrix.columns if matrix.dimensions[c] != dim]
        if not partial_cols:
            raise ExplainError(f"omitting dimension {dim!r} would empty the matrix")
    full = run_protocol(
        matrix, split, space, search_iterations=search_iterations, seed=seed,
        threads=threads, reduced=reduced, label="full",
    )
    results: dict[str, ChunkResult] = {}
    for dim in dims:
        partial = run_protocol(
            matrix.drop_dimension(dim), split, space, search_iterations=search_iterations,
            seed=seed, threads=threads, reduced=reduced, label=f"without-{dim}",
        )
        diffs = full.adjusted_r2_values() - partial.adjusted_r2_values()
        results[dim] = ChunkResult(dimension=dim, diffs=diffs, partial_report=partial)
    return full, results


def chunk_test(
    matrix: FeatureMatrix,
    dimension: str,
    split: SplitProtocol | None = None,
    space: SearchSpace | None = None,
    **kwargs,
) -> ChunkResult:
    _, results = chunk_tests(matrix, [dimension], split, space, **kwargs)
    return results[dimension]


def write_rank_csv(table: stats.RankTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "feature", "median_abs_shap"])
        for rank, feature, med in table.as_rows():
            writer.writerow([rank, feature, repr(med)])


def write_pdp(curve: PdpCurve, csv_path, sidecar_path, svg_path=None) -> None:
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["grid_value", "mean_prediction"])
        for g, v in zip(curve.grid, curve.mean_prediction):
            writer.writerow([repr(float(g)), repr(float(v))])
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "feature": curve.feature,
                "deciles": [float(d) for d in curve.deciles],
                "back_transformed": curve.back_transformed,
                "constant": curve.constant,
            },
            fh,
            indent=1,
        )
    if svg_path is not None:
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(pdp_svg(curve))


def pdp_svg(curve: PdpCurve, width: int = 640, height: int = 400, pad: int = 45) -> str:
    """Minimal standalone SVG line plot of the curve with decile ticks."""
    gx, gy = curve.grid, curve.mean_prediction
    x0, x1 = float(np.min(gx)), float(np.max(gx))
    y0, y1 = float(np.min(gy)), float(np.max(gy))
    xspan = (x1 - x0) or 1.0
    yspan = (y1 - y0) or 1.0

    def sx(v):
        return pad + (v - x0) / xspan * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / yspan * (height - 2 * pad)

    points = " ".join(f"{sx(float(a)):.2f},{sy(float(b)):.2f}" for a, b in zip(gx, gy))
    ticks = "".join(
        f'<line x1="{sx(float(d)):.2f}" y1="{height - pad}" x2="{sx(float(d)):.2f}" '
        f'y2="{height - pad + 6}" stroke="#888"/>'
        for d in curve.deciles
    )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white"/>'
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{points}"/>'
        f"{ticks}"
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="#333"/>'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="#333"/>'
        f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="12" text-anchor="middle">{curve.feature}</text>'
        "</svg>"
    )
