"""Numba kernels for exact path-dependent TreeSHAP.

The traversal keeps, per unique feature on the current decision path, the
fraction of cover-weighted paths that flow down when the feature is unknown
(zero fraction) and when it is known (one fraction), along with the
permutation weights needed to score each feature's withdrawal from the path.

``condition`` (+1 / -1) forces one feature to be treated as always present or
always absent, which is what the pairwise interaction computation needs.

The tree walk is an explicit-stack DFS rather than recursion: every frame
owns a region of the shared path buffers (child offset = parent offset +
parent region size), which keeps the kernels cacheable and depth-safe.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _extend(fidx, zero, one, pw, off, depth, zero_fraction, one_fraction, feature_index):
    fidx[off + depth] = feature_index
    zero[off + depth] = zero_fraction
    one[off + depth] = one_fraction
    pw[off + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[off + i + 1] += one_fraction * pw[off + i] * (i + 1.0) / (depth + 1.0)
        pw[off + i] = zero_fraction * pw[off + i] * (depth - i) / (depth + 1.0)


@njit(cache=True, nogil=True)
def _unwind(fidx, zero, one, pw, off, depth, index):
    one_fraction = one[off + index]
    zero_fraction = zero[off + index]
    next_one = pw[off + depth]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = pw[off + i]
            pw[off + i] = next_one * (depth + 1.0) / ((i + 1.0) * one_fraction)
            next_one = tmp - pw[off + i] * zero_fraction * (depth - i) / (depth + 1.0)
        else:
            pw[off + i] = pw[off + i] * (depth + 1.0) / (zero_fraction * (depth - i))
    for i in range(index, depth):
        fidx[off + i] = fidx[off + i + 1]
        zero[off + i] = zero[off + i + 1]
        one[off + i] = one[off + i + 1]


@njit(cache=True, nogil=True)
def _unwound_sum(fidx, zero, one, pw, off, depth, index):
    one_fraction = one[off + index]
    zero_fraction = zero[off + index]
    next_one = pw[off + depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = next_one * (depth + 1.0) / ((i + 1.0) * one_fraction)
            total += tmp
            next_one = pw[off + i] - tmp * zero_fraction * (depth - i) / (depth + 1.0)
        else:
            total += (pw[off + i] / zero_fraction) / ((depth - i) / (depth + 1.0))
    return total


@njit(cache=True, nogil=True)
def _tree_shap_one(
    children_left,
    children_right,
    feature,
    threshold,
    value,
    cover,
    x,
    phi,
    condition,
    condition_feature,
    fidx,
    zero,
    one,
    pw,
    s_node,
    s_depth,
    s_off,
    s_poff,
    s_pfeat,
    s_zf,
    s_of,
    s_cf,
):
    top = 0
    s_node[top] = 0
    s_depth[top] = 0
    s_off[top] = 0
    s_poff[top] = 0
    s_pfeat[top] = -1
    s_zf[top] = 1.0
    s_of[top] = 1.0
    s_cf[top] = 1.0
    top += 1

    while top > 0:
        top -= 1
        node = s_node[top]
        depth = s_depth[top]
        off = s_off[top]
        poff = s_poff[top]
        pfeat = s_pfeat[top]
        zf = s_zf[top]
        of = s_of[top]
        cf = s_cf[top]

        if cf == 0.0:
            continue

        region = depth + 2  # entries this frame may touch
        for i in range(depth + 1):
            fidx[off + i] = fidx[poff + i]
            zero[off + i] = zero[poff + i]
            one[off + i] = one[poff + i]
            pw[off + i] = pw[poff + i]

        if condition == 0 or condition_feature != pfeat:
            _extend(fidx, zero, one, pw, off, depth, zf, of, pfeat)

        split = feature[node]

        if children_left[node] < 0:  # leaf
            for i in range(1, depth + 1):
                w = _unwound_sum(fidx, zero, one, pw, off, depth, i)
                phi[fidx[off + i]] += w * (one[off + i] - zero[off + i]) * value[node] * cf
            continue

        left = children_left[node]
        right = children_right[node]
        if x[split] <= threshold[node]:
            hot, cold = left, right
        else:
            hot, cold = right, left
        w = cover[node]
        hot_zero = cover[hot] / w
        cold_zero = cover[cold] / w
        incoming_zero = 1.0
        incoming_one = 1.0

        # if this feature already sits on the path, undo and redo its entry
        path_index = 0
        while path_index <= depth:
            if fidx[off + path_index] == split:
                break
            path_index += 1
        if path_index != depth + 1:
            incoming_zero = zero[off + path_index]
            incoming_one = one[off + path_index]
            _unwind(fidx, zero, one, pw, off, depth, path_index)
            depth -= 1

        hot_cf = cf
        cold_cf = cf
        if condition > 0 and split == condition_feature:
            cold_cf = 0.0
            depth -= 1
        elif condition < 0 and split == condition_feature:
            hot_cf *= hot_zero
            cold_cf *= cold_zero
            depth -= 1

        child_off = off + region
        # cold first so the hot child is processed first
        s_node[top] = cold
        s_depth[top] = depth + 1
        s_off[top] = child_off
        s_poff[top] = off
        s_pfeat[top] = split
        s_zf[top] = cold_zero * incoming_zero
        s_of[top] = 0.0
        s_cf[top] = cold_cf
        top += 1
        s_node[top] = hot
        s_depth[top] = depth + 1
        s_off[top] = child_off
        s_poff[top] = off
        s_pfeat[top] = split
        s_zf[top] = hot_zero * incoming_zero
        s_of[top] = incoming_one
        s_cf[top] = hot_cf
        top += 1


@njit(cache=True, nogil=True)
def tree_shap_rows(
    children_left,
    children_right,
    feature,
    threshold,
    value,
    cover,
    x_rows,
    phi_out,
    max_depth,
    condition,
    condition_feature,
):
    """Accumulate per-row SHAP contributions of one tree into phi_out."""
    buf = (max_depth + 3) * (max_depth + 4) // 2 + 4
    cap = 2 * (max_depth + 3)
    fidx = np.empty(buf, dtype=np.int64)
    zero = np.empty(buf, dtype=np.float64)
    one = np.empty(buf, dtype=np.float64)
    pw = np.empty(buf, dtype=np.float64)
    s_node = np.empty(cap, dtype=np.int64)
    s_depth = np.empty(cap, dtype=np.int64)
    s_off = np.empty(cap, dtype=np.int64)
    s_poff = np.empty(cap, dtype=np.int64)
    s_pfeat = np.empty(cap, dtype=np.int64)
    s_zf = np.empty(cap, dtype=np.float64)
    s_of = np.empty(cap, dtype=np.float64)
    s_cf = np.empty(cap, dtype=np.float64)
    for r in range(x_rows.shape[0]):
        _tree_shap_one(
            children_left, children_right, feature, threshold, value, cover,
            x_rows[r], phi_out[r], condition, condition_feature,
            fidx, zero, one, pw,
            s_node, s_depth, s_off, s_poff, s_pfeat, s_zf, s_of, s_cf,
        )


@njit(cache=True, nogil=True)
def tree_expectation_subset(
    children_left, children_right, feature, threshold, value, cover, x, in_subset
):
    """Cover-weighted conditional expectation with a feature subset fixed.

    Splits on fixed features follow x; other splits average their children
    by cover. Computed as a downward weight flow over the tree.
    """
    n = children_left.size
    nodes = np.empty(n, dtype=np.int64)
    weights = np.empty(n, dtype=np.float64)
    nodes[0] = 0
    weights[0] = 1.0
    top = 1
    total = 0.0
    while top > 0:
        top -= 1
        node = nodes[top]
        w = weights[top]
        if children_left[node] < 0:
            total += w * value[node]
            continue
        f = feature[node]
        left = children_left[node]
        right = children_right[node]
        if in_subset[f]:
            nxt = left if x[f] <= threshold[node] else right
            nodes[top] = nxt
            weights[top] = w
            top += 1
        else:
            nodes[top] = left
            weights[top] = w * cover[left] / cover[node]
            top += 1
            nodes[top] = right
            weights[top] = w * cover[right] / cover[node]
            top += 1
    return total
