"""Independent reference computations used to check the package.

These deliberately avoid the package's incremental state: features are
recomputed per transaction by re-scanning the raw dataset, Shapley values by
enumerating all feature subsets, and CART trees by trying every split.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np

from ethpace.chain import WEI_PER_GWEI, Dataset, day_ordinal, hour_of, weekday_of
from ethpace.features import SIMILAR_K, WINDOW_BLOCKS, agg_mean, agg_median, agg_std, gas_usage_of


def naive_feature_rows(dataset: Dataset, block_whitelist=None):
    """Recompute every feature for every eligible tx by full window rescans.

    Yields (tx_hash, dict of feature values, target) in the same order as
    build_feature_matrix emits rows.
    """
    blocks = list(dataset.blocks)
    txs_by_block = {}
    for tx in dataset.transactions:
        txs_by_block.setdefault(tx.block_number, []).append(tx)
    first_day = day_ordinal(blocks[0].timestamp)
    whitelist = set(block_whitelist) if block_whitelist is not None else None

    pend = list(dataset.pending_pool_series)
    util = list(dataset.net_util_series)

    block_pos = {b.number: i for i, b in enumerate(blocks)}
    # dataset.transactions is in block order, then inclusion order, so one
    # pass collects per-day prices in the emission order
    day_prices: dict[int, list[float]] = {}
    for tx in dataset.transactions:
        d = day_ordinal(blocks[block_pos[tx.block_number]].timestamp)
        day_prices.setdefault(d, []).append(tx.gas_price_wei / WEI_PER_GWEI)
    issuer_txs: dict[str, list] = {}
    for tx in dataset.transactions:
        issuer_txs.setdefault(tx.issuer, []).append(tx)
    for group in issuer_txs.values():
        group.sort(key=lambda t: t.nonce)

    for i, block in enumerate(blocks):
        btxs = txs_by_block.get(block.number, [])
        if not btxs or i < WINDOW_BLOCKS or day_ordinal(block.timestamp) == first_day:
            continue
        if whitelist is not None and block.number not in whitelist:
            continue
        window = blocks[i - WINDOW_BLOCKS : i]
        window_txs = [txs_by_block.get(b.number, []) for b in window]
        if sum(len(ts) for ts in window_txs) == 0:
            continue
        for tx in btxs:
            row = _naive_row(
                dataset, blocks, i, tx, window, window_txs, day_prices, issuer_txs, block_pos, pend, util
            )
            target = (block.timestamp - tx.submission_time) / 60.0
            yield tx.hash, row, target


def _series_value_at(series, when):
    best = None
    for s in series:
        if s.timestamp <= when:
            best = s.value
        else:
            break
    return best if best is not None else 0.0


def _naive_row(dataset, blocks, i, tx, window, window_txs, day_prices, issuer_txs, block_pos, pend, util):
    block = blocks[i]
    row = {}
    meta = dataset.contracts.get(tx.target) if tx.target is not None else None
    row["contract_block_number"] = float(meta.deployed_block_number) if meta else 0.0
    row["contract_bytecode_length"] = float(meta.bytecode_length) if meta else 0.0
    row["is_erc721"] = 1.0 if (meta and meta.is_erc721) else 0.0
    row["is_erc20"] = 1.0 if (meta and meta.is_erc20) else 0.0
    row["to_contract"] = 1.0 if tx.target is not None else 0.0
    row["pending_pool"] = _series_value_at(pend, tx.submission_time)
    row["net_util"] = _series_value_at(util, tx.submission_time)
    row["day"] = float(weekday_of(tx.submission_time))
    row["hour"] = float(hour_of(tx.submission_time))

    row["gas_price_gwei"] = tx.gas_price_wei / WEI_PER_GWEI
    row["tx_nonce"] = float(tx.nonce)
    row["value"] = float(tx.value_eth)
    row["tx_gas_limit"] = float(tx.gas_limit)
    row["input_length"] = float(tx.input_length)

    counts = np.array([float(len(ts)) for ts in window_txs])
    row["total_txs_120"] = float(np.sum(counts))
    row["avg_txs_120"] = float(np.mean(counts))
    row["med_txs_120"] = float(np.median(counts))
    row["std_txs_120"] = float(np.std(counts))
    row["total_txs_1"] = float(len(window_txs[-1]))

    day = day_ordinal(block.timestamp)
    prev_day_prices = day_prices.get(day - 1)
    row["avg_gas_price_gwei_prev_day"] = float(np.mean(np.array(prev_day_prices))) if prev_day_prices else 0.0

    diffs = np.array([float(b.difficulty) for b in window])
    row["avg_difficulty_120"] = float(np.mean(diffs))
    row["med_difficulty_120"] = float(np.median(diffs))
    row["std_difficulty_120"] = float(np.std(diffs))
    row["difficulty_1"] = float(window[-1].difficulty)

    usage = [
        gas_usage_of(t)
        for ts in window_txs
        for t in ts
        if tx.target is not None
        and tx.function_selector is not None
        and t.target == tx.target
        and t.function_selector == tx.function_selector
    ]
    usage = np.array(usage)
    row["avg_func_gas_usage_120"] = agg_mean(usage)
    row["med_func_gas_usage_120"] = agg_median(usage)
    row["std_func_gas_usage_120"] = agg_std(usage)

    lower = blocks[i - WINDOW_BLOCKS - 1].timestamp if i >= WINDOW_BLOCKS + 1 else -math.inf
    upper = blocks[i - 1].timestamp
    pool_vals = np.array([s.value for s in pend if lower < s.timestamp <= upper])
    row["avg_pending_pool_120"] = agg_mean(pool_vals)
    row["med_pending_pool_120"] = agg_median(pool_vals)
    row["std_pending_pool_120"] = agg_std(pool_vals)

    mine = issuer_txs[tx.issuer]
    pending = [
        t.gas_price_wei / WEI_PER_GWEI
        for t in mine
        if t.nonce < tx.nonce and block_pos[t.block_number] >= i
    ]
    pending = np.array(pending)
    row["num_pending"] = float(pending.size)
    row["avg_pend_prices"] = agg_mean(pending)
    row["med_pend_prices"] = agg_median(pending)
    row["std_pend_prices"] = agg_std(pending)

    # price standing per window block, by explicit comparison
    above, same, below = [], [], []
    p_above, p_same, p_below = [], [], []
    for ts in window_txs:
        a = sum(1 for t in ts if t.gas_price_wei > tx.gas_price_wei)
        s = sum(1 for t in ts if t.gas_price_wei == tx.gas_price_wei)
        b = sum(1 for t in ts if t.gas_price_wei < tx.gas_price_wei)
        above.append(float(a))
        same.append(float(s))
        below.append(float(b))
        n = len(ts)
        p_above.append(a / n if n else 0.0)
        p_same.append(s / n if n else 0.0)
        p_below.append(b / n if n else 0.0)
    total = float(np.sum(counts))
    for rel, cnt, pct in (("above", above, p_above), ("same", same, p_same), ("below", below, p_below)):
        cnt = np.array(cnt)
        pct = np.array(pct)
        row[f"avg_num_{rel}_120"] = float(np.mean(cnt))
        row[f"med_num_{rel}_120"] = float(np.median(cnt))
        row[f"std_num_{rel}_120"] = float(np.std(cnt))
        row[f"avg_pct_{rel}_120"] = float(np.mean(pct))
        row[f"med_pct_{rel}_120"] = float(np.median(pct))
        row[f"std_pct_{rel}_120"] = float(np.std(pct))
        row[f"num_{rel}_1"] = float(cnt[-1])
        row[f"num_{rel}_120"] = float(np.sum(cnt))
        row[f"pct_{rel}_1"] = float(pct[-1])
        row[f"pct_{rel}_120"] = float(np.sum(cnt)) / total

    prev_prices = np.array([t.gas_price_wei / WEI_PER_GWEI for t in window_txs[-1]])
    row["avg_gas_price_1"] = agg_mean(prev_prices)
    row["med_gas_price_1"] = agg_median(prev_prices)
    row["std_gas_price_1"] = agg_std(prev_prices)
    pooled_wei = np.array([float(t.gas_price_wei) for ts in window_txs for t in ts])
    pooled_gwei = pooled_wei / WEI_PER_GWEI
    row["avg_gas_price_120"] = agg_mean(pooled_gwei)
    row["med_gas_price_120"] = agg_median(pooled_gwei)
    row["std_gas_price_120"] = agg_std(pooled_gwei)

    thresholds = np.quantile(pooled_wei, [0.2, 0.4, 0.6, 0.8])
    cat = 4
    for k in range(4):
        if tx.gas_price_wei <= thresholds[k]:
            cat = k
            break
    row["gas_price_cat_enc"] = float(cat)

    # k most similar prices with (distance, recency) ordering
    entries = []
    for j, (b, ts) in enumerate(zip(window, window_txs)):
        for ii, t in enumerate(ts):
            d = abs(float(t.gas_price_wei) - float(tx.gas_price_wei))
            minutes = (b.timestamp - t.submission_time) / 60.0
            entries.append((d, -j, -ii, minutes))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    sel = np.array([e[3] for e in entries[:SIMILAR_K]])
    row["past_avg_time"] = agg_mean(sel)
    row["past_med_time"] = agg_median(sel)
    row["past_std_time"] = agg_std(sel)
    row["closest_tx_pr_time"] = float(sel[0]) if sel.size else 0.0

    return row


def enumeration_shap(forest, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Shapley values by full 2^M coalition enumeration, vectorized.

    One downward tree walk propagates a weight vector over all coalitions:
    coalitions containing the split feature flow to x's branch, the rest
    split by cover fractions. Shapley values then combine the coalition
    values with the usual factorial kernel.
    """
    m = len(forest.feature_names)
    if m > 16:
        raise ValueError("coalition enumeration is only feasible for small M")
    n_sub = 1 << m
    values = np.zeros(n_sub)

    for tree in forest.trees:
        stack = [(0, np.ones(n_sub))]
        while stack:
            node, w = stack.pop()
            if tree.children_left[node] < 0:
                values += w * tree.value[node]
                continue
            f = int(tree.feature[node])
            lo, hi = int(tree.children_left[node]), int(tree.children_right[node])
            has_f = (np.arange(n_sub) >> f) & 1 == 1
            frac_lo = tree.cover[lo] / tree.cover[node]
            frac_hi = tree.cover[hi] / tree.cover[node]
            goes_left = x[f] <= tree.threshold[node]
            w_lo = np.where(has_f, w if goes_left else 0.0, w * frac_lo)
            w_hi = np.where(has_f, 0.0 if goes_left else w, w * frac_hi)
            stack.append((lo, w_lo))
            stack.append((hi, w_hi))
    values /= len(forest.trees)

    fact = [math.factorial(k) for k in range(m + 1)]
    sizes = np.array([bin(s).count("1") for s in range(n_sub)])
    phi = np.zeros(m)
    for i in range(m):
        without = np.array([s for s in range(n_sub) if not (s >> i) & 1])
        k = sizes[without]
        w = np.array([fact[kk] * fact[m - kk - 1] / fact[m] for kk in k])
        phi[i] = float(w @ (values[without | (1 << i)] - values[without]))
    return float(values[0]), phi


def brute_force_shap(forest, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Shapley values by enumerating all 2^M feature subsets.

    The value of a coalition S is the cover-weighted conditional expectation
    of each tree with the features in S fixed to x, averaged over trees.
    """
    m = len(forest.feature_names)
    if m > 16:
        raise ValueError("subset enumeration is only feasible for small M")

    def tree_value(tree, subset: frozenset) -> float:
        def rec(node: int) -> float:
            if tree.children_left[node] < 0:
                return float(tree.value[node])
            f = int(tree.feature[node])
            if f in subset:
                nxt = tree.children_left[node] if x[f] <= tree.threshold[node] else tree.children_right[node]
                return rec(int(nxt))
            lo, hi = int(tree.children_left[node]), int(tree.children_right[node])
            wl, wr = float(tree.cover[lo]), float(tree.cover[hi])
            return (wl * rec(lo) + wr * rec(hi)) / (wl + wr)

        return rec(0)

    def value(subset: frozenset) -> float:
        return sum(tree_value(t, subset) for t in forest.trees) / len(forest.trees)

    base = value(frozenset())
    phi = np.zeros(m)
    fact = [math.factorial(k) for k in range(m + 1)]
    others = list(range(m))
    for i in range(m):
        rest = [j for j in others if j != i]
        for k in range(m):
            for combo in combinations(rest, k):
                s = frozenset(combo)
                w = fact[k] * fact[m - k - 1] / fact[m]
                phi[i] += w * (value(s | {i}) - value(s))
    return base, phi


def brute_force_interactions(forest, x: np.ndarray) -> np.ndarray:
    """Shapley interaction index by subset enumeration (small M only)."""
    m = len(forest.feature_names)

    def tree_value(tree, subset: frozenset) -> float:
        def rec(node: int) -> float:
            if tree.children_left[node] < 0:
                return float(tree.value[node])
            f = int(tree.feature[node])
            if f in subset:
                nxt = tree.children_left[node] if x[f] <= tree.threshold[node] else tree.children_right[node]
                return rec(int(nxt))
            lo, hi = int(tree.children_left[node]), int(tree.children_right[node])
            wl, wr = float(tree.cover[lo]), float(tree.cover[hi])
            return (wl * rec(lo) + wr * rec(hi)) / (wl + wr)

        return rec(0)

    def value(subset: frozenset) -> float:
        return sum(tree_value(t, subset) for t in forest.trees) / len(forest.trees)

    fact = [math.factorial(k) for k in range(m + 1)]
    inter = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            rest = [f for f in range(m) if f not in (i, j)]
            total = 0.0
            for k in range(m - 1):
                for combo in combinations(rest, k):
                    s = frozenset(combo)
                    w = fact[k] * fact[m - k - 2] / (2.0 * fact[m - 1])
                    delta = (
                        value(s | {i, j}) - value(s | {i}) - value(s | {j}) + value(s)
                    )
                    total += w * delta
            inter[i, j] = inter[j, i] = total
    _, phi = brute_force_shap(forest, x)
    for i in range(m):
        inter[i, i] = phi[i] - (inter[i].sum() - inter[i, i])
    return inter


def exhaustive_cart(x: np.ndarray, y: np.ndarray, max_depth, min_leaf: int = 1):
    """Plain exhaustive-split CART used to cross-check fit_tree.

    Returns a nested dict tree: leaves {'value', 'n'}, internal nodes
    {'feature', 'threshold', 'left', 'right', 'n'}.
    """

    def build(rows: np.ndarray, depth: int):
        target = y[rows]
        node = {"n": int(rows.size)}
        if (max_depth is not None and depth >= max_depth) or rows.size < 2 * min_leaf or target.max() == target.min():
            node["value"] = float(target.mean())
            return node
        # totals accumulated in row order, same as the fitter
        total_sum = 0.0
        total_sq = 0.0
        for v in target:
            total_sum += float(v)
            total_sq += float(v) * float(v)
        best = None
        for f in range(x.shape[1]):
            vals = x[rows, f]
            order = np.argsort(vals, kind="stable")
            sv, sy = vals[order], target[order]
            # same prefix-sum SSE arithmetic as the fitter so that exact SSE
            # ties across features resolve identically
            csum = np.cumsum(sy)
            csq = np.cumsum(sy * sy)
            for c in range(rows.size - 1):
                if sv[c] == sv[c + 1]:
                    continue
                nl = c + 1
                nr = rows.size - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                sl, ql = csum[c], csq[c]
                sse = (ql - sl * sl / nl) + ((total_sq - ql) - (total_sum - sl) ** 2 / nr)
                thr = (sv[c] + sv[c + 1]) / 2.0
                if thr >= sv[c + 1]:
                    thr = float(sv[c])
                # same tie rule as the builder: first strictly better wins,
                # scanning features then thresholds in ascending order
                if best is None or sse < best[0]:
                    best = (sse, f, thr)
        if best is None:
            node["value"] = float(target.mean())
            return node
        _, f, thr = best
        mask = x[rows, f] <= thr
        node["feature"] = int(f)
        node["threshold"] = float(thr)
        node["left"] = build(rows[mask], depth + 1)
        node["right"] = build(rows[~mask], depth + 1)
        return node

    return build(np.arange(x.shape[0]), 0)
