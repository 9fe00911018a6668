"""Per-transaction feature engineering over rolling block windows.

One pass in block order maintains a ring of the previous 120 block summaries,
a per-issuer pending tracker, and previous-day price tallies. Every feature
for a transaction is computed from state strictly preceding the transaction's
block: nothing from its own block or any later one may leak into its row.

Transactions in the first 120 blocks of the dataset, on the dataset's first
UTC day, or whose whole 120-block window is empty are excluded and counted.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .chain import (
    WEI_PER_GWEI,
    Dataset,
    Transaction,
    day_ordinal,
    hour_of,
    weekday_of,
)

WINDOW_BLOCKS = 120
SIMILAR_K = 100

DIMENSIONS = ("contextual", "behavioral", "historical", "pricing")

# columns that are flags or label encodings and therefore exempt from the
# log transform downstream
LOG_EXEMPT = frozenset({"to_contract", "is_erc20", "is_erc721", "day", "hour", "gas_price_cat_enc"})

TARGET_COLUMN = "processing_time_minutes"


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    dimension: str
    window: str  # none | prev_1 | prev_120 | prev_day


def _specs() -> list[FeatureSpec]:
    ctx = [
        ("contract_block_number", "none"),
        ("contract_bytecode_length", "none"),
        ("is_erc721", "none"),
        ("is_erc20", "none"),
        ("to_contract", "none"),
        ("pending_pool", "none"),
        ("net_util", "none"),
        ("day", "none"),
        ("hour", "none"),
    ]
    beh = [
        ("gas_price_gwei", "none"),
        ("tx_nonce", "none"),
        ("value", "none"),
        ("tx_gas_limit", "none"),
        ("input_length", "none"),
    ]
    hist = [
        ("total_txs_120", "prev_120"),
        ("avg_txs_120", "prev_120"),
        ("med_txs_120", "prev_120"),
        ("std_txs_120", "prev_120"),
        ("total_txs_1", "prev_1"),
        ("avg_gas_price_gwei_prev_day", "prev_day"),
        ("avg_difficulty_120", "prev_120"),
        ("med_difficulty_120", "prev_120"),
        ("std_difficulty_120", "prev_120"),
        ("difficulty_1", "prev_1"),
        ("avg_func_gas_usage_120", "prev_120"),
        ("med_func_gas_usage_120", "prev_120"),
        ("std_func_gas_usage_120", "prev_120"),
        ("avg_pending_pool_120", "prev_120"),
        ("med_pending_pool_120", "prev_120"),
        ("std_pending_pool_120", "prev_120"),
        ("avg_pend_prices", "none"),
        ("med_pend_prices", "none"),
        ("std_pend_prices", "none"),
        ("num_pending", "none"),
    ]
    pricing = []
    for agg in ("avg", "med", "std"):
        for rel in ("above", "same", "below"):
            pricing.append((f"{agg}_num_{rel}_120", "prev_120"))
    for agg in ("avg", "med", "std"):
        for rel in ("above", "same", "below"):
            pricing.append((f"{agg}_pct_{rel}_120", "prev_120"))
    for rel in ("above", "same", "below"):
        pricing.append((f"num_{rel}_1", "prev_1"))
    for rel in ("above", "same", "below"):
        pricing.append((f"num_{rel}_120", "prev_120"))
    for rel in ("above", "same", "below"):
        pricing.append((f"pct_{rel}_1", "prev_1"))
    for rel in ("above", "same", "below"):
        pricing.append((f"pct_{rel}_120", "prev_120"))
    pricing.append(("gas_price_cat_enc", "prev_120"))
    for agg in ("avg", "med", "std"):
        pricing.append((f"{agg}_gas_price_1", "prev_1"))
    for agg in ("avg", "med", "std"):
        pricing.append((f"{agg}_gas_price_120", "prev_120"))
    pricing.extend(
        [
            ("past_avg_time", "prev_120"),
            ("past_med_time", "prev_120"),
            ("past_std_time", "prev_120"),
            ("closest_tx_pr_time", "prev_120"),
        ]
    )
    specs = [FeatureSpec(n, "contextual", w) for n, w in ctx]
    specs += [FeatureSpec(n, "behavioral", w) for n, w in beh]
    specs += [FeatureSpec(n, "historical", w) for n, w in hist]
    specs += [FeatureSpec(n, "pricing", w) for n, w in pricing]
    return specs


ALL_FEATURES: tuple[FeatureSpec, ...] = tuple(_specs())
FEATURE_BY_NAME = {s.name: s for s in ALL_FEATURES}

assert len(ALL_FEATURES) == 75
assert sum(1 for s in ALL_FEATURES if s.dimension == "contextual") == 9
assert sum(1 for s in ALL_FEATURES if s.dimension == "behavioral") == 5
assert sum(1 for s in ALL_FEATURES if s.dimension == "historical") == 20
assert sum(1 for s in ALL_FEATURES if s.dimension == "pricing") == 41


@dataclass
class FeatureMatrix:
    """Named feature columns plus the processing-time target, one row per tx."""

    tx_hashes: list[str]
    columns: list[str]
    values: np.ndarray  # (n, p) float64
    target: np.ndarray  # (n,) float64
    dimensions: dict[str, str]
    days: np.ndarray  # (n,) UTC day ordinal of the tx's block
    log_transformed: bool = False
    first_day: int | None = None  # dataset's first UTC day (protocol anchor)
    excluded: dict = field(default_factory=dict, compare=False)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.columns.index(name)
        except ValueError:
            raise KeyError(f"no feature column {name!r}") from None
        return self.values[:, j]

    def select_columns(self, names) -> "FeatureMatrix":
        names = list(names)
        idx = [self.columns.index(n) for n in names]
        return FeatureMatrix(
            tx_hashes=self.tx_hashes,
            columns=names,
            values=self.values[:, idx].copy(),
            target=self.target,
            dimensions={n: self.dimensions[n] for n in names},
            days=self.days,
            log_transformed=self.log_transformed,
            first_day=self.first_day,
        )

    def drop_dimension(self, dimension: str) -> "FeatureMatrix":
        keep = [c for c in self.columns if self.dimensions[c] != dimension]
        return self.select_columns(keep)

    def take_rows(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx)
        return FeatureMatrix(
            tx_hashes=[self.tx_hashes[i] for i in idx],
            columns=list(self.columns),
            values=self.values[idx],
            target=self.target[idx],
            dimensions=dict(self.dimensions),
            days=self.days[idx],
            log_transformed=self.log_transformed,
            first_day=self.first_day,
        )

    def log_exempt_columns(self) -> set[str]:
        return {c for c in self.columns if c in LOG_EXEMPT}


def agg_mean(arr: np.ndarray) -> float:
    return float(np.mean(arr)) if arr.size else 0.0


def agg_median(arr: np.ndarray) -> float:
    return float(np.median(arr)) if arr.size else 0.0


def agg_std(arr: np.ndarray) -> float:
    """Population standard deviation; 0 for empty input."""
    return float(np.std(arr)) if arr.size else 0.0


def pricing_counts(sorted_prices: np.ndarray, price) -> tuple:
    """Counts and shares of one block's prices above / same / below a price.

    Percentages of an empty block are 0 by convention.
    """
    n = sorted_prices.size
    below = int(np.searchsorted(sorted_prices, price, side="left"))
    above = n - int(np.searchsorted(sorted_prices, price, side="right"))
    same = n - below - above
    if n == 0:
        return 0, 0, 0, 0.0, 0.0, 0.0
    return above, same, below, above / n, same / n, below / n


def gas_price_category(window_prices: np.ndarray, price) -> int:
    """Quantile band 0..4 of a price within the pooled window prices.

    Band k is the smallest k with price <= quantile(0.2 * (k + 1)); prices
    above every quantile land in band 4.
    """
    if window_prices.size == 0:
        raise FeatureError("gas_price_category needs a non-empty window")
    thresholds = np.quantile(window_prices, [0.2, 0.4, 0.6, 0.8])
    return int(np.searchsorted(thresholds, price, side="left"))


def similar_price_times(
    prices: np.ndarray,
    times: np.ndarray,
    block_idx: np.ndarray,
    intra_idx: np.ndarray,
    price: float,
    k: int = SIMILAR_K,
) -> tuple[float, float, float, float]:
    """Aggregate the processing times of the k most similarly priced txs.

    Similarity is the absolute price difference; ties are broken by recency
    (later block, then later intra-block position). Fewer than k candidates
    means all are used; an empty window yields zeros.
    """
    if prices.size == 0:
        return 0.0, 0.0, 0.0, 0.0
    dist = np.abs(prices - price)
    if prices.size > k:
        kth = np.partition(dist, k - 1)[k - 1]
        cand = np.flatnonzero(dist <= kth)
    else:
        cand = np.arange(prices.size)
    order = np.lexsort((-intra_idx[cand], -block_idx[cand], dist[cand]))
    chosen = cand[order[:k]]
    sel = times[chosen]
    return agg_mean(sel), agg_median(sel), agg_std(sel), float(sel[0])


class _BlockSummary:
    __slots__ = ("n", "prices_sorted", "difficulty", "prices", "times", "func")

    def __init__(self, txs: list[Transaction], block_ts: int, difficulty: int, gas_usage_of):
        self.n = len(txs)
        self.difficulty = float(difficulty)
        prices = np.array([t.gas_price_wei for t in txs], dtype=np.float64)
        self.prices = prices
        self.prices_sorted = np.sort(prices)
        self.times = np.array([(block_ts - t.submission_time) / 60.0 for t in txs], dtype=np.float64)
        self.func: dict[tuple, list[float]] = {}
        for t in txs:
            if t.target is not None and t.function_selector is not None:
                self.func.setdefault((t.target, t.function_selector), []).append(gas_usage_of(t))


def gas_usage_of(tx: Transaction) -> float:
    """Consumed gas when the dump carries it, otherwise the gas limit."""
    return float(tx.gas_used) if tx.gas_used is not None else float(tx.gas_limit)


class _IssuerTracker:
    """Pending transactions per issuer, known through the previous block.

    A transaction's pending set is its issuer's lower-nonce transactions not
    yet mined in any strictly earlier block; their gas prices were fixed at
    submission, so reading them leaks nothing from later blocks.
    """

    def __init__(self, dataset: Dataset):
        self.prices: dict[str, np.ndarray] = {}
        self.rank: dict[str, int] = {}
        self.ptr: dict[str, int] = {}
        by_issuer: dict[str, list[Transaction]] = {}
        for tx in dataset.transactions:
            by_issuer.setdefault(tx.issuer, []).append(tx)
        for issuer, group in by_issuer.items():
            group.sort(key=lambda t: t.nonce)
            self.prices[issuer] = np.array([t.gas_price_wei / WEI_PER_GWEI for t in group], dtype=np.float64)
            self.ptr[issuer] = 0
            for r, t in enumerate(group):
                self.rank[t.hash] = r

    def pending_prices(self, tx: Transaction) -> np.ndarray:
        return self.prices[tx.issuer][self.ptr[tx.issuer] : self.rank[tx.hash]]

    def advance(self, txs: list[Transaction]) -> None:
        for tx in txs:
            self.ptr[tx.issuer] += 1


def _series_arrays(series):
    ts = np.array([s.timestamp for s in series], dtype=np.float64)
    vals = np.array([s.value for s in series], dtype=np.float64)
    return ts, vals


def _series_at(ts: np.ndarray, vals: np.ndarray, when: np.ndarray) -> np.ndarray:
    """Value of the latest sample at or before each time; 0 with no history."""
    out = np.zeros(when.size)
    if ts.size == 0:
        return out
    idx = np.searchsorted(ts, when, side="right") - 1
    ok = idx >= 0
    out[ok] = vals[idx[ok]]
    return out


def build_feature_matrix(dataset: Dataset, specs=None, block_whitelist=None) -> FeatureMatrix:
    """One block-ordered pass computing every requested feature per tx."""
    if specs is None:
        specs = ALL_FEATURES
    requested = []
    for s in specs:
        name = s.name if isinstance(s, FeatureSpec) else str(s)
        if name not in FEATURE_BY_NAME:
            raise FeatureError(f"unknown feature spec {name!r}")
        requested.append(name)

    blocks = dataset.blocks
    txs_by_block: dict[int, list[Transaction]] = {}
    for tx in dataset.transactions:
        txs_by_block.setdefault(tx.block_number, []).append(tx)

    whitelist = set(block_whitelist) if block_whitelist is not None else None
    first_day = day_ordinal(blocks[0].timestamp) if blocks else None

    pend_ts, pend_vals = _series_arrays(dataset.pending_pool_series)
    util_ts, util_vals = _series_arrays(dataset.net_util_series)

    tracker = _IssuerTracker(dataset)
    ring: deque[_BlockSummary] = deque(maxlen=WINDOW_BLOCKS)

    day_prices: dict[int, list[float]] = {}
    day_mean_cache: dict[int, float] = {}

    def prev_day_mean(day: int) -> float:
        if day not in day_mean_cache:
            prices = day_prices.get(day)
            day_mean_cache[day] = float(np.mean(np.array(prices))) if prices else 0.0
        return day_mean_cache[day]

    excluded = {"early_blocks": 0, "first_day": 0, "not_sampled": 0, "empty_window": 0}
    rows: list[np.ndarray] = []
    hashes: list[str] = []
    targets: list[float] = []
    row_days: list[int] = []

    col_index = {name: j for j, name in enumerate(FEATURE_BY_NAME)}
    n_cols = len(col_index)

    for i, block in enumerate(blocks):
        btxs = txs_by_block.get(block.number, [])
        day = day_ordinal(block.timestamp)

        if btxs:
            if i < WINDOW_BLOCKS:
                excluded["early_blocks"] += len(btxs)
            elif day == first_day:
                excluded["first_day"] += len(btxs)
            elif whitelist is not None and block.number not in whitelist:
                excluded["not_sampled"] += len(btxs)
            else:
                window_total = sum(s.n for s in ring)
                if window_total == 0:
                    excluded["empty_window"] += len(btxs)
                else:
                    block_rows = _block_features(
                        block, btxs, i, blocks, ring, tracker, dataset,
                        pend_ts, pend_vals, util_ts, util_vals,
                        prev_day_mean(day - 1), n_cols, col_index,
                    )
                    rows.extend(block_rows)
                    hashes.extend(t.hash for t in btxs)
                    targets.extend((block.timestamp - t.submission_time) / 60.0 for t in btxs)
                    row_days.extend([day] * len(btxs))

        ring.append(_BlockSummary(btxs, block.timestamp, block.difficulty, gas_usage_of))
        tracker.advance(btxs)
        if btxs:
            day_prices.setdefault(day, []).extend(t.gas_price_wei / WEI_PER_GWEI for t in btxs)

    values = np.array(rows, dtype=np.float64) if rows else np.zeros((0, n_cols))
    matrix = FeatureMatrix(
        tx_hashes=hashes,
        columns=list(FEATURE_BY_NAME),
        values=values,
        target=np.array(targets, dtype=np.float64),
        dimensions={s.name: s.dimension for s in ALL_FEATURES},
        days=np.array(row_days, dtype=np.int64),
        first_day=first_day,
        excluded=excluded,
    )
    if requested != list(FEATURE_BY_NAME):
        selected = matrix.select_columns(requested)
        selected.excluded = excluded
        matrix = selected
    return matrix


def _block_features(
    block, btxs, i, blocks, ring, tracker, dataset,
    pend_ts, pend_vals, util_ts, util_vals,
    prev_day_price_mean, n_cols, col,
):
    m = len(btxs)
    out = np.zeros((m, n_cols))
    q_prices = np.array([t.gas_price_wei for t in btxs], dtype=np.float64)
    sub_times = np.array([t.submission_time for t in btxs], dtype=np.float64)

    # contextual
    for r, t in enumerate(btxs):
        meta = dataset.contracts.get(t.target) if t.target is not None else None
        out[r, col["contract_block_number"]] = meta.deployed_block_number if meta else 0.0
        out[r, col["contract_bytecode_length"]] = meta.bytecode_length if meta else 0.0
        out[r, col["is_erc721"]] = 1.0 if (meta and meta.is_erc721) else 0.0
        out[r, col["is_erc20"]] = 1.0 if (meta and meta.is_erc20) else 0.0
        out[r, col["to_contract"]] = 1.0 if t.target is not None else 0.0
        out[r, col["day"]] = weekday_of(t.submission_time)
        out[r, col["hour"]] = hour_of(t.submission_time)
    out[:, col["pending_pool"]] = _series_at(pend_ts, pend_vals, sub_times)
    out[:, col["net_util"]] = _series_at(util_ts, util_vals, sub_times)

    # behavioral
    out[:, col["gas_price_gwei"]] = q_prices / WEI_PER_GWEI
    out[:, col["tx_nonce"]] = [t.nonce for t in btxs]
    out[:, col["value"]] = [t.value_eth for t in btxs]
    out[:, col["tx_gas_limit"]] = [t.gas_limit for t in btxs]
    out[:, col["input_length"]] = [t.input_length for t in btxs]

    # window summaries shared by the whole block
    summaries = list(ring)
    counts = np.array([s.n for s in summaries], dtype=np.float64)
    diffs = np.array([s.difficulty for s in summaries], dtype=np.float64)
    prev = summaries[-1]

    out[:, col["total_txs_120"]] = counts.sum()
    out[:, col["avg_txs_120"]] = np.mean(counts)
    out[:, col["med_txs_120"]] = np.median(counts)
    out[:, col["std_txs_120"]] = np.std(counts)
    out[:, col["total_txs_1"]] = prev.n
    out[:, col["avg_gas_price_gwei_prev_day"]] = prev_day_price_mean
    out[:, col["avg_difficulty_120"]] = np.mean(diffs)
    out[:, col["med_difficulty_120"]] = np.median(diffs)
    out[:, col["std_difficulty_120"]] = np.std(diffs)
    out[:, col["difficulty_1"]] = prev.difficulty

    # pending-pool samples taken while the window blocks were appended
    lower = blocks[i - WINDOW_BLOCKS - 1].timestamp if i >= WINDOW_BLOCKS + 1 else -np.inf
    upper = blocks[i - 1].timestamp
    lo = int(np.searchsorted(pend_ts, lower, side="right"))
    hi = int(np.searchsorted(pend_ts, upper, side="right"))
    window_pool = pend_vals[lo:hi]
    out[:, col["avg_pending_pool_120"]] = agg_mean(window_pool)
    out[:, col["med_pending_pool_120"]] = agg_median(window_pool)
    out[:, col["std_pending_pool_120"]] = agg_std(window_pool)

    # per-issuer pending transactions
    for r, t in enumerate(btxs):
        pend = tracker.pending_prices(t)
        out[r, col["num_pending"]] = pend.size
        out[r, col["avg_pend_prices"]] = agg_mean(pend)
        out[r, col["med_pend_prices"]] = agg_median(pend)
        out[r, col["std_pend_prices"]] = agg_std(pend)

    # function gas usage over the window, keyed by (contract, selector)
    for r, t in enumerate(btxs):
        if t.target is None or t.function_selector is None:
            continue
        key = (t.target, t.function_selector)
        chunks = [s.func[key] for s in summaries if key in s.func]
        usage = np.array([u for chunk in chunks for u in chunk], dtype=np.float64)
        out[r, col["avg_func_gas_usage_120"]] = agg_mean(usage)
        out[r, col["med_func_gas_usage_120"]] = agg_median(usage)
        out[r, col["std_func_gas_usage_120"]] = agg_std(usage)

    # price standing against each window block; aggregates run on contiguous
    # per-tx rows so the arithmetic matches a per-tx rescan to the last bit
    L = len(summaries)
    above = np.zeros((L, m))
    same = np.zeros((L, m))
    below = np.zeros((L, m))
    p_above = np.zeros((L, m))
    p_same = np.zeros((L, m))
    p_below = np.zeros((L, m))
    for j, s in enumerate(summaries):
        lo_j = np.searchsorted(s.prices_sorted, q_prices, side="left")
        hi_j = np.searchsorted(s.prices_sorted, q_prices, side="right")
        below[j] = lo_j
        above[j] = s.n - hi_j
        same[j] = hi_j - lo_j
        if s.n:
            p_above[j] = above[j] / s.n
            p_same[j] = same[j] / s.n
            p_below[j] = below[j] / s.n

    window_total = counts.sum()
    for rel, cnt, pct in (("above", above, p_above), ("same", same, p_same), ("below", below, p_below)):
        cnt_rows = np.ascontiguousarray(cnt.T)
        pct_rows = np.ascontiguousarray(pct.T)
        for r in range(m):
            out[r, col[f"avg_num_{rel}_120"]] = np.mean(cnt_rows[r])
            out[r, col[f"med_num_{rel}_120"]] = np.median(cnt_rows[r])
            out[r, col[f"std_num_{rel}_120"]] = np.std(cnt_rows[r])
            out[r, col[f"avg_pct_{rel}_120"]] = np.mean(pct_rows[r])
            out[r, col[f"med_pct_{rel}_120"]] = np.median(pct_rows[r])
            out[r, col[f"std_pct_{rel}_120"]] = np.std(pct_rows[r])
            out[r, col[f"num_{rel}_120"]] = np.sum(cnt_rows[r])
            out[r, col[f"pct_{rel}_120"]] = np.sum(cnt_rows[r]) / window_total
        out[:, col[f"num_{rel}_1"]] = cnt[-1]
        out[:, col[f"pct_{rel}_1"]] = pct[-1]

    # previous-block price aggregates and pooled-window price aggregates
    out[:, col["avg_gas_price_1"]] = agg_mean(prev.prices / WEI_PER_GWEI)
    out[:, col["med_gas_price_1"]] = agg_median(prev.prices / WEI_PER_GWEI)
    out[:, col["std_gas_price_1"]] = agg_std(prev.prices / WEI_PER_GWEI)
    pooled = np.concatenate([s.prices for s in summaries]) if L else np.empty(0)
    pooled_gwei = pooled / WEI_PER_GWEI
    out[:, col["avg_gas_price_120"]] = agg_mean(pooled_gwei)
    out[:, col["med_gas_price_120"]] = agg_median(pooled_gwei)
    out[:, col["std_gas_price_120"]] = agg_std(pooled_gwei)

    # price category from the pooled window distribution
    thresholds = np.quantile(np.sort(pooled), [0.2, 0.4, 0.6, 0.8])
    out[:, col["gas_price_cat_enc"]] = np.searchsorted(thresholds, q_prices, side="left")

    # processing times of the most similarly priced window transactions
    sim_prices = pooled
    sim_times = np.concatenate([s.times for s in summaries])
    sim_block = np.concatenate([np.full(s.n, j) for j, s in enumerate(summaries)]) if L else np.empty(0)
    sim_intra = np.concatenate([np.arange(s.n) for s in summaries]) if L else np.empty(0)
    for r in range(m):
        avg, med, std, closest = similar_price_times(
            sim_prices, sim_times, sim_block, sim_intra, q_prices[r]
        )
        out[r, col["past_avg_time"]] = avg
        out[r, col["past_med_time"]] = med
        out[r, col["past_std_time"]] = std
        out[r, col["closest_tx_pr_time"]] = closest

    return list(out)


def write_feature_csv(matrix: FeatureMatrix, csv_path, sidecar_path) -> None:
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tx_hash", *matrix.columns, TARGET_COLUMN])
        for i in range(matrix.n_rows):
            writer.writerow(
                [matrix.tx_hashes[i]]
                + [repr(float(v)) for v in matrix.values[i]]
                + [repr(float(matrix.target[i]))]
            )
    sidecar = {
        "dimensions": matrix.dimensions,
        "log_transformed": matrix.log_transformed,
        "log_exempt": sorted(matrix.log_exempt_columns()),
        "days": [int(d) for d in matrix.days],
        "first_day": matrix.first_day,
        "excluded": matrix.excluded,
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)


def read_feature_csv(csv_path, sidecar_path) -> FeatureMatrix:
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "tx_hash" or header[-1] != TARGET_COLUMN:
            raise FeatureError(f"{csv_path}: unexpected header")
        columns = header[1:-1]
        hashes, rows, targets = [], [], []
        for row in reader:
            hashes.append(row[0])
            rows.append([float(v) for v in row[1:-1]])
            targets.append(float(row[-1]))
    return FeatureMatrix(
        tx_hashes=hashes,
        columns=columns,
        values=np.array(rows, dtype=np.float64) if rows else np.zeros((0, len(columns))),
        target=np.array(targets, dtype=np.float64),
        dimensions=sidecar["dimensions"],
        days=np.array(sidecar["days"], dtype=np.int64),
        log_transformed=bool(sidecar["log_transformed"]),
        first_day=sidecar.get("first_day"),
        excluded=sidecar.get("excluded", {}),
    )
