"""Compiled inner loops (tree traversal and per-stratum moments)."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def leaf_positions(x, feature, threshold, left, right, position):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if x[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = position[node]
    return out


@njit(cache=True)
def stratum_sums(pos, y, a, n_leaves, n_arms):
    """Counts, sums and sums of squares of ``y`` by (leaf position, arm)."""
    counts = np.zeros((n_leaves, n_arms), dtype=np.int64)
    s1 = np.zeros((n_leaves, n_arms))
    s2 = np.zeros((n_leaves, n_arms))
    for i in range(y.shape[0]):
        k = pos[i]
        j = a[i]
        counts[k, j] += 1
        s1[k, j] += y[i]
        s2[k, j] += y[i] * y[i]
    return counts, s1, s2


@njit(cache=True)
def binary_objective(x, y, a, feature, threshold, left, right, position, n_leaves,
                     pi, optimize, nu, min_cell, theta):
    """Empirical variance criterion for a two-arm tree.

    ``y`` should be centred (the criterion is shift invariant) to limit
    cancellation in the second moments. When ``optimize`` is set the Neyman
    targets are written into ``pi`` before evaluation.
    """
    m = y.shape[0]
    pos = leaf_positions(x, feature, threshold, left, right, position)
    counts, s1, s2 = stratum_sums(pos, y, a, n_leaves, 2)
    total = 0.0
    infeasible = False
    for k in range(n_leaves):
        n0 = counts[k, 0]
        n1 = counts[k, 1]
        if n0 < min_cell or n1 < min_cell:
            infeasible = True
            if optimize:
                pi[k] = 0.5
            continue
        mu0 = s1[k, 0] / n0
        mu1 = s1[k, 1] / n1
        v0 = max(s2[k, 0] / n0 - mu0 * mu0, 0.0)
        v1 = max(s2[k, 1] / n1 - mu1 * mu1, 0.0)
        if optimize:
            sd0 = np.sqrt(v0)
            sd1 = np.sqrt(v1)
            if sd0 + sd1 > 0.0:
                p = sd1 / (sd0 + sd1)
            else:
                p = 0.5
            pi[k] = min(max(p, nu), 1.0 - nu)
        het = mu1 - mu0 - theta
        total += (n0 + n1) / m * (het * het + v0 / (1.0 - pi[k]) + v1 / pi[k])
    if infeasible:
        return np.inf
    return total


@njit(cache=True)
def leaf_cells(feature, threshold, left, right, position, n_leaves, lower, upper):
    """Lower and upper corners of each leaf cell, by leaf position."""
    d = lower.shape[0]
    lo = np.empty((n_leaves, d))
    hi = np.empty((n_leaves, d))
    n_nodes = feature.shape[0]
    node_lo = np.empty((n_nodes, d))
    node_hi = np.empty((n_nodes, d))
    node_lo[0] = lower
    node_hi[0] = upper
    # preorder ids: parents precede children
    for i in range(n_nodes):
        j = feature[i]
        if j < 0:
            lo[position[i]] = node_lo[i]
            hi[position[i]] = node_hi[i]
            continue
        node_lo[left[i]] = node_lo[i]
        node_hi[left[i]] = node_hi[i]
        node_hi[left[i], j] = threshold[i]
        node_lo[right[i]] = node_lo[i]
        node_hi[right[i]] = node_hi[i]
        node_lo[right[i], j] = threshold[i]
    return lo, hi


@njit(cache=True)
def canonical_preorder(lo, hi, upper, budget):
    """Canonical cut sequence for the partition with leaf cells ``lo``/``hi``.

    At every node the lexicographically smallest ``(dim, threshold)`` that
    splits the region without cutting a cell, and leaves both sides
    representable within the remaining depth, is used. Returns preorder
    arrays ``dims`` and ``thresholds`` (``dims == -1`` marks a leaf) and the
    original position of each leaf in preorder; ``n_nodes`` is -1 if the
    budget is too small. Requires at most 20 cells.
    """
    K, d = lo.shape
    # candidate cuts sit on some cell's upper face, strictly inside the space
    cj = np.empty(K * d, dtype=np.int64)
    cg = np.empty(K * d)
    nc = 0
    for i in range(K):
        for j in range(d):
            if hi[i, j] < upper[j]:
                dup = False
                for c in range(nc):
                    if cj[c] == j and cg[c] == hi[i, j]:
                        dup = True
                        break
                if not dup:
                    cj[nc] = j
                    cg[nc] = hi[i, j]
                    nc += 1
    # sort candidates lexicographically (insertion sort; nc is small)
    for a in range(1, nc):
        j0 = cj[a]
        g0 = cg[a]
        b = a - 1
        while b >= 0 and (cj[b] > j0 or (cj[b] == j0 and cg[b] > g0)):
            cj[b + 1] = cj[b]
            cg[b + 1] = cg[b]
            b -= 1
        cj[b + 1] = j0
        cg[b + 1] = g0
    below = np.zeros(nc, dtype=np.int64)
    above = np.zeros(nc, dtype=np.int64)
    for c in range(nc):
        for i in range(K):
            if hi[i, cj[c]] <= cg[c]:
                below[c] |= 1 << i
            elif lo[i, cj[c]] >= cg[c]:
                above[c] |= 1 << i
    full = (1 << K) - 1
    big = 1 << 30
    depth = np.full(full + 1, big, dtype=np.int64)
    for mask in range(1, full + 1):
        if mask & (mask - 1) == 0:
            depth[mask] = 0
            continue
        best = big
        for c in range(nc):
            if mask & ~(below[c] | above[c]):
                continue
            lm = mask & below[c]
            rm = mask & above[c]
            if lm == 0 or rm == 0:
                continue
            v = 1 + max(depth[lm], depth[rm])
            if v < best:
                best = v
        depth[mask] = best

    size = 2 * K - 1
    dims = np.full(size, -1, dtype=np.int64)
    thr = np.zeros(size)
    leaf = np.full(size, -1, dtype=np.int64)
    if depth[full] > budget:
        return dims, thr, leaf, -1
    stack_mask = np.empty(size, dtype=np.int64)
    stack_rem = np.empty(size, dtype=np.int64)
    top = 0
    stack_mask[0] = full
    stack_rem[0] = budget
    n = 0
    while top >= 0:
        mask = stack_mask[top]
        rem = stack_rem[top]
        top -= 1
        if mask & (mask - 1) == 0:
            k = 0
            while (mask >> k) & 1 == 0:
                k += 1
            leaf[n] = k
            n += 1
            continue
        for c in range(nc):
            if mask & ~(below[c] | above[c]):
                continue
            lm = mask & below[c]
            rm = mask & above[c]
            if lm == 0 or rm == 0:
                continue
            if depth[lm] <= rem - 1 and depth[rm] <= rem - 1:
                dims[n] = cj[c]
                thr[n] = cg[c]
                n += 1
                # right pushed first so the left subtree is emitted next
                top += 1
                stack_mask[top] = rm
                stack_rem[top] = rem - 1
                top += 1
                stack_mask[top] = lm
                stack_rem[top] = rem - 1
                break
    return dims, thr, leaf, n
