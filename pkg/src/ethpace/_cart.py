"""Numba kernel for greedy variance-reduction CART fitting.

Presorted strategy: every feature's row order is stable-argsorted once per
tree; each split then stably partitions all sorted arrays (plus the original
row order) in place, so a node's per-feature order is always the stable sort
of its rows and no per-node sorting happens. Per-node candidate features come
from a splitmix64 stream seeded per tree.

Split selection: scan candidate features in ascending order and boundaries
between distinct sorted values in ascending order; a split wins only on a
strictly smaller summed child SSE, so ties resolve to the lowest feature
index and then the lowest threshold.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True, inline="always")
def _next_u64(state):
    state[0] = state[0] + _SPLITMIX_GAMMA
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True, inline="always")
def _rand_below(state, k):
    # multiply-shift bounded draw; bias is negligible for feature sampling
    return np.int64((np.uint64(_next_u64(state)) >> np.uint64(32)) * np.uint64(k) >> np.uint64(32))


@njit(cache=True, nogil=True)
def build_tree(
    xt, y, max_depth, min_leaf, m_cand, seed,
    children_left, children_right, feature, threshold, value, cover,
):
    """Fill the node arrays (xt is the feature-major (p, n) matrix);
    returns the number of nodes created."""
    n = xt.shape[1]
    p = xt.shape[0]

    # per-feature stable order plus the original row order, all partitioned
    # in lockstep as splits are made
    sorted_rows = np.empty((p, n), dtype=np.int64)
    for f in range(p):
        sorted_rows[f] = np.argsort(xt[f], kind="mergesort")
    rowseq = np.empty(n, dtype=np.int64)
    for i in range(n):
        rowseq[i] = i
    buf = np.empty(n, dtype=np.int64)
    go_left = np.empty(n, dtype=np.bool_)

    state = np.empty(1, dtype=np.uint64)
    state[0] = seed
    pool = np.empty(p, dtype=np.int64)
    crow = np.empty(m_cand, dtype=np.int64)

    max_nodes = children_left.size
    cap = 4 * (n + 2)
    s_start = np.empty(cap, dtype=np.int64)
    s_end = np.empty(cap, dtype=np.int64)
    s_depth = np.empty(cap, dtype=np.int64)
    s_parent = np.empty(cap, dtype=np.int64)
    s_left = np.empty(cap, dtype=np.int64)

    top = 0
    s_start[top] = 0
    s_end[top] = n
    s_depth[top] = 0
    s_parent[top] = -1
    s_left[top] = 0
    top += 1

    count = 0
    while top > 0:
        top -= 1
        start = s_start[top]
        end = s_end[top]
        depth = s_depth[top]
        parent = s_parent[top]
        is_left = s_left[top]

        node = count
        count += 1
        rows = end - start

        total = 0.0
        y_min = y[rowseq[start]]
        y_max = y_min
        for i in range(start, end):
            v = y[rowseq[i]]
            total += v
            if v < y_min:
                y_min = v
            if v > y_max:
                y_max = v

        children_left[node] = -1
        children_right[node] = -1
        feature[node] = -1
        threshold[node] = 0.0
        value[node] = total / rows
        cover[node] = rows
        if parent >= 0:
            if is_left == 1:
                children_left[parent] = node
            else:
                children_right[parent] = node

        if (max_depth >= 0 and depth >= max_depth) or rows < 2 * min_leaf or y_min == y_max:
            continue

        # candidate features: sorted partial Fisher-Yates draw (all when m = p)
        if m_cand < p:
            for i in range(p):
                pool[i] = i
            for i in range(m_cand):
                j = i + _rand_below(state, p - i)
                tmp = pool[i]
                pool[i] = pool[j]
                pool[j] = tmp
            for i in range(m_cand):
                crow[i] = pool[i]
            crow[:m_cand].sort()
        else:
            for i in range(p):
                crow[i] = i

        # target totals for the split objective, accumulated in row order
        total_sum = 0.0
        total_sq = 0.0
        for i in range(start, end):
            v = y[rowseq[i]]
            total_sum += v
            total_sq += v * v

        best_sse = np.inf
        best_feat = -1
        best_thr = 0.0
        for ci in range(m_cand):
            f = crow[ci]
            seg = sorted_rows[f]
            if xt[f, seg[start]] == xt[f, seg[end - 1]]:
                continue
            sl = 0.0
            ql = 0.0
            for i in range(start, end - 1):
                v = y[seg[i]]
                sl += v
                ql += v * v
                a = xt[f, seg[i]]
                b = xt[f, seg[i + 1]]
                if a == b:
                    continue
                nl = i + 1 - start
                nr = rows - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                sse = (ql - sl * sl / nl) + ((total_sq - ql) - (total_sum - sl) ** 2 / nr)
                if sse < best_sse:
                    best_sse = sse
                    best_feat = f
                    thr = (a + b) / 2.0
                    # adjacent floats can round the midpoint onto b, which
                    # would empty the right child
                    best_thr = a if thr >= b else thr

        if best_feat < 0:
            continue
        if count + 2 > max_nodes:
            continue  # cannot happen with max_nodes = 2n + 1

        # stable partition of every order array on the chosen split
        n_left = 0
        for i in range(start, end):
            r = rowseq[i]
            flag = xt[best_feat, r] <= best_thr
            go_left[r] = flag
            if flag:
                n_left += 1
        for f in range(p):
            seg = sorted_rows[f]
            li = 0
            ri = n_left
            for i in range(start, end):
                r = seg[i]
                if go_left[r]:
                    buf[li] = r
                    li += 1
                else:
                    buf[ri] = r
                    ri += 1
            for i in range(rows):
                seg[start + i] = buf[i]
        li = 0
        ri = n_left
        for i in range(start, end):
            r = rowseq[i]
            if go_left[r]:
                buf[li] = r
                li += 1
            else:
                buf[ri] = r
                ri += 1
        for i in range(rows):
            rowseq[start + i] = buf[i]

        feature[node] = best_feat
        threshold[node] = best_thr

        # push right first so the left subtree is built (and numbered) first
        s_start[top] = start + n_left
        s_end[top] = end
        s_depth[top] = depth + 1
        s_parent[top] = node
        s_left[top] = 0
        top += 1
        s_start[top] = start
        s_end[top] = start + n_left
        s_depth[top] = depth + 1
        s_parent[top] = node
        s_left[top] = 1
        top += 1

    return count


@njit(cache=True, nogil=True)
def predict_rows(children_left, children_right, feature, threshold, value, x, out):
    """Add each row's leaf value to ``out`` (callers accumulate over trees)."""
    for r in range(x.shape[0]):
        node = 0
        while children_left[node] >= 0:
            if x[r, feature[node]] <= threshold[node]:
                node = children_left[node]
            else:
                node = children_right[node]
        out[r] += value[node]
