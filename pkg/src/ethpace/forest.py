"""CART regression trees, bagged forests, random search, and the temporal
bootstrap validation protocol.

Trees store per-node training covers (row counts including bootstrap
duplicates), which the explanation stack needs for cover-weighted conditional
expectations. Split candidates are midpoints of consecutive distinct sorted
values; the best split minimizes the summed child SSE, with ties resolved
toward the lowest feature index and then the lowest threshold.

Everything is deterministic given the master seed: per-tree and per-bootstrap
generators are derived by labeled seeding, so results do not depend on
scheduling or the number of worker processes.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import stats
from ._cart import build_tree, predict_rows
from .features import FeatureMatrix
from .seeding import rng_for

FOREST_FORMAT_VERSION = 1

DEFAULT_TREE_COUNT_RANGE = (10, 300)
DEFAULT_MAX_DEPTHS = tuple(range(3, 31)) + (None,)
DEFAULT_FEATURE_FRACTIONS = ("sqrt", "log2", 0.3, 0.5, 1.0)


class ForestError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """The matrix cannot support the requested split protocol."""


@dataclass(frozen=True)
class Hyperparams:
    tree_count: int = 100
    max_tree_depth: int | None = None  # None = unlimited
    feature_fraction: float | str = 1.0  # fraction in (0, 1] or 'sqrt' / 'log2'
    min_leaf_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.tree_count < 1 or self.min_leaf_size < 1:
            raise ForestError("tree_count and min_leaf_size must be >= 1")
        if isinstance(self.feature_fraction, str):
            if self.feature_fraction not in ("sqrt", "log2"):
                raise ForestError(f"unknown feature fraction rule {self.feature_fraction!r}")
        elif not 0.0 < float(self.feature_fraction) <= 1.0:
            raise ForestError("feature_fraction must be in (0, 1]")

    def candidate_count(self, n_features: int) -> int:
        if self.feature_fraction == "sqrt":
            m = int(np.ceil(np.sqrt(n_features)))
        elif self.feature_fraction == "log2":
            m = int(np.ceil(np.log2(n_features))) if n_features > 1 else 1
        else:
            m = int(np.ceil(float(self.feature_fraction) * n_features))
        return max(1, min(m, n_features))

    def to_dict(self) -> dict:
        return {
            "tree_count": self.tree_count,
            "max_tree_depth": self.max_tree_depth,
            "feature_fraction": self.feature_fraction,
            "min_leaf_size": self.min_leaf_size,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "Hyperparams":
        return Hyperparams(
            tree_count=int(d["tree_count"]),
            max_tree_depth=None if d["max_tree_depth"] is None else int(d["max_tree_depth"]),
            feature_fraction=d["feature_fraction"],
            min_leaf_size=int(d.get("min_leaf_size", 1)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class RegressionTree:
    """Array-of-nodes CART tree. Leaves have children_left == -1.

    ``value`` holds the mean training target of the rows reaching each node
    (for every node, not just leaves); ``cover`` the number of those rows.
    """

    children_left: np.ndarray
    children_right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.children_left.size

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        best = 0
        for i in range(self.n_nodes):
            d = depth[i]
            best = max(best, int(d))
            left, right = self.children_left[i], self.children_right[i]
            if left >= 0:
                depth[left] = d + 1
                depth[right] = d + 1
        return best

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        out = np.zeros(x.shape[0])
        predict_rows(self.children_left, self.children_right, self.feature, self.threshold, self.value, x, out)
        return out


def fit_tree(x: np.ndarray, y: np.ndarray, hp: Hyperparams, rng: np.random.Generator) -> RegressionTree:
    """Greedy variance-reduction CART on the given rows."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.size or y.size < 1:
        raise ForestError("fit_tree needs an (n, p) matrix and n targets, n >= 1")
    n, p = x.shape
    max_nodes = 2 * n + 1
    children_left = np.empty(max_nodes, dtype=np.int64)
    children_right = np.empty(max_nodes, dtype=np.int64)
    feature = np.empty(max_nodes, dtype=np.int64)
    threshold = np.empty(max_nodes, dtype=np.float64)
    value = np.empty(max_nodes, dtype=np.float64)
    cover = np.empty(max_nodes, dtype=np.float64)
    depth = -1 if hp.max_tree_depth is None else int(hp.max_tree_depth)
    count = build_tree(
        np.ascontiguousarray(x.T), y, depth, int(hp.min_leaf_size),
        hp.candidate_count(p), np.uint64(rng.integers(0, 2**63)),
        children_left, children_right, feature, threshold, value, cover,
    )
    return RegressionTree(
        children_left=children_left[:count].copy(),
        children_right=children_right[:count].copy(),
        feature=feature[:count].copy(),
        threshold=threshold[:count].copy(),
        value=value[:count].copy(),
        cover=cover[:count].copy(),
    )


@dataclass
class RandomForest:
    trees: list[RegressionTree]
    feature_names: list[str]
    hyperparams: Hyperparams
    seed: int

    def predict_array(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        acc = np.zeros(x.shape[0])
        for t in self.trees:
            predict_rows(t.children_left, t.children_right, t.feature, t.threshold, t.value, x, acc)
        return acc / len(self.trees)

    def predict_matrix(self, matrix: FeatureMatrix) -> np.ndarray:
        missing = [n for n in self.feature_names if n not in matrix.columns]
        if missing:
            raise ForestError(f"matrix is missing feature {missing[0]!r}")
        idx = [matrix.columns.index(n) for n in self.feature_names]
        return self.predict_array(matrix.values[:, idx])

    def predict_row(self, row: dict) -> float:
        missing = [n for n in self.feature_names if n not in row]
        if missing:
            raise ForestError(f"row is missing feature {missing[0]!r}")
        x = np.array([[row[n] for n in self.feature_names]], dtype=np.float64)
        return float(self.predict_array(x)[0])

    def to_dict(self) -> dict:
        return {
            "format_version": FOREST_FORMAT_VERSION,
            "feature_names": self.feature_names,
            "seed": self.seed,
            "hyperparams": self.hyperparams.to_dict(),
            "trees": [
                {
                    "children_left": t.children_left.tolist(),
                    "children_right": t.children_right.tolist(),
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "value": t.value.tolist(),
                    "cover": t.cover.tolist(),
                }
                for t in self.trees
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def from_dict(d: dict) -> "RandomForest":
        if d.get("format_version") != FOREST_FORMAT_VERSION:
            raise ForestError(f"unsupported forest format {d.get('format_version')!r}")
        trees = [
            RegressionTree(
                children_left=np.array(t["children_left"], dtype=np.int64),
                children_right=np.array(t["children_right"], dtype=np.int64),
                feature=np.array(t["feature"], dtype=np.int64),
                threshold=np.array(t["threshold"], dtype=np.float64),
                value=np.array(t["value"], dtype=np.float64),
                cover=np.array(t["cover"], dtype=np.float64),
            )
            for t in d["trees"]
        ]
        return RandomForest(
            trees=trees,
            feature_names=list(d["feature_names"]),
            hyperparams=Hyperparams.from_dict(d["hyperparams"]),
            seed=int(d["seed"]),
        )

    @staticmethod
    def from_json(path) -> "RandomForest":
        with open(path, "r", encoding="utf-8") as fh:
            return RandomForest.from_dict(json.load(fh))


def fit_forest(
    x: np.ndarray,
    y: np.ndarray,
    hp: Hyperparams,
    feature_names=None,
    resample: bool = True,
) -> RandomForest:
    """Bagged CART ensemble; tree t draws its rows and features from a
    generator keyed by (seed, 'tree', t). ``resample=False`` is a test hook
    that trains every tree on the full sample."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] < 2:
        raise ForestError("fit_forest needs at least two rows")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(x.shape[1])]
    trees = []
    for t in range(hp.tree_count):
        rng = rng_for(hp.seed, "tree", t)
        if resample:
            rows = rng.integers(0, x.shape[0], size=x.shape[0])
            trees.append(fit_tree(x[rows], y[rows], hp, rng))
        else:
            trees.append(fit_tree(x, y, hp, rng))
    return RandomForest(trees=trees, feature_names=names, hyperparams=hp, seed=hp.seed)


def fit_forest_matrix(matrix: FeatureMatrix, hp: Hyperparams, resample: bool = True) -> RandomForest:
    return fit_forest(matrix.values, matrix.target, hp, feature_names=matrix.columns, resample=resample)


@dataclass(frozen=True)
class SearchSpace:
    tree_count_range: tuple[int, int] = DEFAULT_TREE_COUNT_RANGE
    max_depths: tuple = DEFAULT_MAX_DEPTHS
    feature_fractions: tuple = DEFAULT_FEATURE_FRACTIONS
    min_leaf_sizes: tuple = (1,)

    def sample(self, rng: np.random.Generator, seed: int) -> Hyperparams:
        lo, hi = self.tree_count_range
        return Hyperparams(
            tree_count=int(rng.integers(lo, hi + 1)),
            max_tree_depth=self.max_depths[int(rng.integers(0, len(self.max_depths)))],
            feature_fraction=self.feature_fractions[int(rng.integers(0, len(self.feature_fractions)))],
            min_leaf_size=int(self.min_leaf_sizes[int(rng.integers(0, len(self.min_leaf_sizes)))]),
            seed=seed,
        )

    def to_dict(self) -> dict:
        return {
            "tree_count_range": list(self.tree_count_range),
            "max_depths": ["unlimited" if d is None else d for d in self.max_depths],
            "feature_fractions": list(self.feature_fractions),
            "min_leaf_sizes": list(self.min_leaf_sizes),
        }

    @staticmethod
    def from_dict(d: dict) -> "SearchSpace":
        depths = tuple(None if v in (None, "unlimited") else int(v) for v in d["max_depths"])
        return SearchSpace(
            tree_count_range=tuple(d["tree_count_range"]),
            max_depths=depths,
            feature_fractions=tuple(d["feature_fractions"]),
            min_leaf_sizes=tuple(d.get("min_leaf_sizes", (1,))),
        )

    def __post_init__(self):
        lo, hi = self.tree_count_range
        if lo < 1 or hi < lo:
            raise ForestError("bad tree_count_range")
        if not self.max_depths or not self.feature_fractions or not self.min_leaf_sizes:
            raise ForestError("empty search space")


def random_search(
    train_x,
    train_y,
    val_x,
    val_y,
    space: SearchSpace,
    iterations: int,
    seed: int,
) -> Hyperparams:
    """Uniformly sample configurations; keep the best validation R^2.

    Ties go to the earliest sampled configuration.
    """
    if iterations < 1:
        raise ForestError("iterations must be >= 1")
    rng = rng_for(seed, "search")
    best_hp = None
    best_score = -np.inf
    for _ in range(iterations):
        hp = space.sample(rng, seed=int(rng.integers(0, 2**31)))
        forest = fit_forest(train_x, train_y, hp)
        score = stats.r_squared(val_y, forest.predict_array(val_x))
        if score > best_score:
            best_score = score
            best_hp = hp
    return best_hp


@dataclass(frozen=True)
class SplitProtocol:
    """Temporal partition: train days 1..28, validation day 29, test day 30."""

    train_days: int = 28
    validation_days: int = 1
    test_days: int = 1
    bootstrap_count: int = 100

    @property
    def total_days(self) -> int:
        return self.train_days + self.validation_days + self.test_days


def split_by_days(matrix: FeatureMatrix, split: SplitProtocol, reduced: bool = False):
    """Row indices (train, validation, test).

    Day buckets are anchored at the dataset's first UTC day (matrix rows
    never cover that warm-up day, but it still counts toward "the first 28
    days of data"). The reduced protocol instead partitions rows by the same
    fractions in temporal order and is meant for short desk-scale datasets.
    """
    n = matrix.n_rows
    if n == 0:
        raise ProtocolError("empty feature matrix")
    if reduced:
        order = np.argsort(matrix.days, kind="stable")
        n_train = int(n * split.train_days / split.total_days)
        n_val = int(n * split.validation_days / split.total_days)
        train = order[:n_train]
        val = order[n_train : n_train + n_val]
        test = order[n_train + n_val :]
        if min(train.size, val.size, test.size) == 0:
            raise ProtocolError("matrix too small for the reduced protocol")
        return train, val, test
    day_arr = matrix.days
    base = matrix.first_day if matrix.first_day is not None else int(day_arr.min())
    span = int(day_arr.max()) - base + 1
    if span < split.total_days:
        raise ProtocolError(
            f"data spans {span} days but the protocol needs {split.total_days}; "
            "rerun with the reduced protocol flag for short datasets"
        )
    t_end = base + split.train_days
    v_end = t_end + split.validation_days
    s_end = v_end + split.test_days
    train = np.flatnonzero(day_arr < t_end)
    val = np.flatnonzero((day_arr >= t_end) & (day_arr < v_end))
    test = np.flatnonzero((day_arr >= v_end) & (day_arr < s_end))
    if min(train.size, val.size, test.size) == 0:
        raise ProtocolError("one of the protocol partitions is empty")
    return train, val, test


@dataclass
class BootstrapResult:
    index: int
    hyperparams: Hyperparams
    test_r2: float
    test_adjusted_r2: float


@dataclass
class EvalReport:
    bootstraps: list[BootstrapResult]
    n_features: int
    n_test_rows: int
    reduced_protocol: bool
    search_iterations: int
    seed: int
    label: str = ""
    comparison: dict | None = None

    def adjusted_r2_values(self) -> np.ndarray:
        return np.array([b.test_adjusted_r2 for b in self.bootstraps])

    def summary(self) -> dict:
        vals = self.adjusted_r2_values()
        return {
            "mean_adjusted_r2": float(np.mean(vals)),
            "median_adjusted_r2": stats.median(vals),
            "mean_r2": float(np.mean([b.test_r2 for b in self.bootstraps])),
            "median_r2": stats.median([b.test_r2 for b in self.bootstraps]),
        }

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "n_features": self.n_features,
            "n_test_rows": self.n_test_rows,
            "reduced_protocol": self.reduced_protocol,
            "search_iterations": self.search_iterations,
            "summary": self.summary(),
            "bootstraps": [
                {
                    "index": b.index,
                    "hyperparams": b.hyperparams.to_dict(),
                    "test_r2": b.test_r2,
                    "test_adjusted_r2": b.test_adjusted_r2,
                }
                for b in self.bootstraps
            ],
            "comparison": self.comparison,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


# worker context for forked protocol workers
_WORKER: dict = {}


def _bootstrap_worker(b: int) -> tuple[int, dict, float, float]:
    ctx = _WORKER
    train_x, train_y = ctx["train_x"], ctx["train_y"]
    val_x, val_y = ctx["val_x"], ctx["val_y"]
    test_x, test_y = ctx["test_x"], ctx["test_y"]
    space, iterations, seed = ctx["space"], ctx["iterations"], ctx["seed"]
    rng = rng_for(seed, "bootstrap", b)
    rows = rng.integers(0, train_x.shape[0], size=train_x.shape[0])
    bx, by = train_x[rows], train_y[rows]
    hp = random_search(bx, by, val_x, val_y, space, iterations, seed=int(rng.integers(0, 2**31)))
    hp = replace(hp, seed=int(rng.integers(0, 2**31)))
    forest = fit_forest(bx, by, hp)
    r2 = stats.r_squared(test_y, forest.predict_array(test_x))
    adj = stats.adjusted_r2(r2, test_y.size, ctx["n_features"])
    return b, hp.to_dict(), float(r2), float(adj)


def _parallel_indices(worker, count: int, threads: int):
    if threads <= 1 or count <= 1 or os.name != "posix":
        return [worker(i) for i in range(count)]
    ctx = None
    try:
        import multiprocessing

        ctx = multiprocessing.get_context("fork")
    except ValueError:
        return [worker(i) for i in range(count)]
    with ProcessPoolExecutor(max_workers=min(threads, count), mp_context=ctx) as pool:
        return sorted(pool.map(worker, range(count)), key=lambda r: r[0])


def run_protocol(
    matrix: FeatureMatrix,
    split: SplitProtocol | None = None,
    space: SearchSpace | None = None,
    search_iterations: int = 20,
    seed: int = 0,
    threads: int = 1,
    reduced: bool = False,
    label: str = "",
) -> EvalReport:
    """Per bootstrap: resample the train partition, tune on the validation
    partition, refit on the same resample, score adjusted R^2 on the test
    partition. Adjusted R^2 uses p = number of feature columns."""
    split = split or SplitProtocol()
    space = space or SearchSpace()
    train, val, test = split_by_days(matrix, split, reduced=reduced)
    global _WORKER
    _WORKER = {
        "train_x": matrix.values[train],
        "train_y": matrix.target[train],
        "val_x": matrix.values[val],
        "val_y": matrix.target[val],
        "test_x": matrix.values[test],
        "test_y": matrix.target[test],
        "space": space,
        "iterations": search_iterations,
        "seed": seed,
        "n_features": matrix.n_features,
    }
    try:
        raw = _parallel_indices(_bootstrap_worker, split.bootstrap_count, threads)
    finally:
        _WORKER = {}
    bootstraps = [
        BootstrapResult(index=b, hyperparams=Hyperparams.from_dict(hp), test_r2=r2, test_adjusted_r2=adj)
        for b, hp, r2, adj in raw
    ]
    return EvalReport(
        bootstraps=bootstraps,
        n_features=matrix.n_features,
        n_test_rows=int(test.size),
        reduced_protocol=reduced,
        search_iterations=search_iterations,
        seed=seed,
        label=label,
    )


def compare_reports(a: EvalReport, b: EvalReport) -> tuple[float, stats.EffectSize]:
    """Two-tailed Mann-Whitney + Cliff's delta on the adjusted-R^2 draws."""
    _, p = stats.mann_whitney(a.adjusted_r2_values(), b.adjusted_r2_values(), two_tailed=True)
    effect = stats.cliffs_delta(a.adjusted_r2_values(), b.adjusted_r2_values())
    return p, effect
