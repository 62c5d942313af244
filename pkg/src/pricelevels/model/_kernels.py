"""Compiled inner loops for tree growing and prediction."""

import numpy as np
from numba import njit


@njit(cache=True)
def _logloss(y, f, e):
    # log(1 + exp(f)) - y * f, stable for large |f|; e is exp(-|f|)
    if f > 0:
        return f + np.log1p(e) - y * f
    return np.log1p(e) - y * f


@njit(cache=True)
def init_rows(y, margin, expm, loss):
    """Per-row ``exp(-|margin|)`` and log-loss, kept up to date by :func:`apply_tree`."""
    for i in range(y.shape[0]):
        e = np.exp(-abs(margin[i]))
        expm[i] = e
        loss[i] = _logloss(y[i], margin[i], e)


@njit(cache=True)
def gradients(y, margin, expm, grad, hess):
    """Log-loss gradient and hessian in place."""
    for i in range(y.shape[0]):
        e = expm[i]
        if margin[i] >= 0:
            p = 1.0 / (1.0 + e)
        else:
            p = e / (1.0 + e)
        grad[i] = p - y[i]
        hess[i] = p * (1.0 - p)


@njit(cache=True)
def apply_tree(margin, value, leaf, lr, weight, loss):
    """Add the tree's scaled leaf values to ``margin``; returns the new weighted mean log-loss.

    ``loss`` already holds the per-row losses at the new margins (see
    :func:`_leaf_values`).
    """
    tot = 0.0
    wsum = 0.0
    for i in range(margin.shape[0]):
        margin[i] += lr * value[leaf[i]]
        tot += weight[i] * loss[i]
        wsum += weight[i]
    return tot / wsum


@njit(cache=True)
def _leaf_values(feature, value, n_nodes, node_of, wg, weight, hess, y, margin, expm, loss, l2, lr):
    n = node_of.shape[0]
    Gs = np.zeros(n_nodes)
    Hs = np.zeros(n_nodes)
    for r in range(n):
        Gs[node_of[r]] += wg[r]
        Hs[node_of[r]] += weight[r] * hess[r]
    for nd in range(n_nodes):
        if feature[nd] < 0:
            value[nd] = -Gs[nd] / (Hs[nd] + l2) if Hs[nd] + l2 > 0.0 else 0.0
    before = np.zeros(n_nodes)
    for r in range(n):
        before[node_of[r]] += weight[r] * loss[r]
    pending = np.zeros(n_nodes, np.bool_)
    for nd in range(n_nodes):
        pending[nd] = feature[nd] < 0 and value[nd] != 0.0
    moved = pending.copy()
    after = np.zeros(n_nodes)
    trial_e = np.empty(n)
    trial_loss = np.empty(n)
    for _ in range(60):
        after[:] = 0.0
        for r in range(n):
            nd = node_of[r]
            if pending[nd]:
                f = margin[r] + lr * value[nd]
                e = np.exp(-abs(f))
                trial_e[r] = e
                trial_loss[r] = _logloss(y[r], f, e)
                after[nd] += weight[r] * trial_loss[r]
        again = False
        for nd in range(n_nodes):
            if pending[nd]:
                if after[nd] <= before[nd]:
                    pending[nd] = False
                else:
                    value[nd] *= 0.5
                    again = True
        if not again:
            break
    for nd in range(n_nodes):
        if pending[nd]:
            value[nd] = 0.0
            moved[nd] = False
    # accepted leaves keep the losses of their final trial
    for r in range(n):
        if moved[node_of[r]]:
            expm[r] = trial_e[r]
            loss[r] = trial_loss[r]


@njit(cache=True)
def grow_tree(Xt, order, grad, hess, weight, y, margin, expm, loss, max_depth, l2, lr, min_gain):
    """Grow one depth-limited regression tree on gradients, level by level.

    ``Xt`` is the feature matrix transposed (one row per feature) and
    ``order[f]`` the rows sorted by feature ``f``, each entry packing the
    value's rank above the row index (see ``gbdt.presort``). Candidate splits are every
    boundary between distinct sorted values within a node; the split
    maximizes the weighted variance gain ``GL^2/WL + GR^2/WR - G^2/W``
    (G = sum w*g, W = sum w), ties going to the lowest feature then the
    lowest threshold. Leaves take the damped Newton step
    ``-sum(w*g) / (sum(w*h) + l2)``, halved until the leaf's weighted
    log-loss under ``lr * value`` is no worse than before.

    ``expm`` and ``loss`` (per-row ``exp(-|margin|)`` and log-loss) are
    advanced to the margins after this tree. Returns node arrays (feature,
    threshold, left, right, value, gain), the node count and each row's leaf.
    """
    # Hot loops index with unsigned integers so that no negative-index
    # wraparound checks are emitted.
    n_feat, n = Xt.shape
    one = np.uint64(1)
    shift = np.uint64(order.itemsize * 4)
    mask = (one << shift) - one
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap, np.float64)
    gain = np.zeros(cap, np.float64)

    # every node owns the same slice [lo, hi) of each feature's row order
    idx = order.copy()
    buf = np.empty(n, order.dtype)
    lo = np.zeros(cap, np.uint64)
    hi = np.zeros(cap, np.uint64)
    hi[0] = n
    node_of = np.zeros(n, np.int64)
    go_left = np.zeros(n, np.uint64)
    wg = weight * grad
    dev = np.empty(n)
    n_nodes = 1
    level_first, level_last = 0, 1

    for depth in range(max_depth):
        new_first = n_nodes
        for nd in range(level_first, level_last):
            a = lo[nd]
            b = hi[nd]
            if b - a < 2:
                continue
            G = 0.0
            W = 0.0
            rows = idx[0]
            k = a
            while k < b:
                r = rows[k] & mask
                G += wg[r]
                W += weight[r]
                k += one
            if W <= 0.0:
                continue
            # GL^2/WL + GR^2/WR - G^2/W == W * C^2 / (WL * WR), C being the
            # running sum of w * (g - G/W): cheaper and free of cancellation
            mu = G / W
            k = a
            while k < b:
                r = rows[k] & mask
                dev[r] = wg[r] - mu * weight[r]
                k += one
            best = min_gain
            best_f = -1
            best_t = 0.0
            last = b - one
            for f in range(n_feat):
                rows = idx[f]
                key = rows[a]
                if (rows[last] ^ key) >> shift == 0:
                    continue  # constant within the node
                c = 0.0
                wl = 0.0
                k = a
                while k < last:
                    r = key & mask
                    c += dev[r]
                    wl += weight[r]
                    nxt = rows[k + one]
                    if (nxt ^ key) >> shift != 0:  # the value changes after row r
                        den = wl * (W - wl)
                        if W * c * c > best * den:
                            if den > 0.0:
                                best = W * c * c / den
                                best_f = f
                                best_t = Xt[f, r]
                    key = nxt
                    k += one
            if best_f < 0:
                continue
            feature[nd] = best_f
            threshold[nd] = best_t
            gain[nd] = best
            left[nd] = n_nodes
            right[nd] = n_nodes + 1
            n_nodes += 2
        if n_nodes == new_first:
            break
        for nd in range(level_first, level_last):
            if feature[nd] < 0:
                continue
            a = lo[nd]
            b = hi[nd]
            xf = Xt[feature[nd]]
            t = threshold[nd]
            ln = left[nd]
            rn = right[nd]
            n_left = np.uint64(0)
            rows = idx[0]
            k = a
            while k < b:
                r = rows[k] & mask
                if xf[r] <= t:
                    go_left[r] = one
                    node_of[r] = ln
                    n_left += one
                else:
                    go_left[r] = 0
                    node_of[r] = rn
                k += one
            if depth == max_depth - 1:
                continue  # children are leaves; only node_of is needed
            for f in range(n_feat):
                # stable and branch-free: each row is written to both outputs
                rows = idx[f]
                i = a
                j = np.uint64(0)
                k = a
                while k < b:
                    r = rows[k]
                    g = go_left[r & mask]
                    rows[i] = r
                    buf[j] = r
                    i += g
                    j += one - g
                    k += one
                k = np.uint64(0)
                while k < j:
                    rows[i + k] = buf[k]
                    k += one
            lo[ln] = a
            hi[ln] = a + n_left
            lo[rn] = a + n_left
            hi[rn] = b
        level_first, level_last = new_first, n_nodes

    _leaf_values(feature, value, n_nodes, node_of, wg, weight, hess, y, margin, expm, loss, l2, lr)
    return feature, threshold, left, right, value, gain, n_nodes, node_of


@njit(cache=True)
def predict_margin(X, feature, threshold, left, right, value, roots, lr, base, stops):
    """Margins after the first ``stops[s]`` trees, for each s; trees are packed at ``roots``."""
    n = X.shape[0]
    out = np.empty((stops.shape[0], n))
    for i in range(n):
        acc = 0.0
        s = 0
        for t in range(roots.shape[0]):
            while s < stops.shape[0] and stops[s] == t:
                out[s, i] = base + lr * acc
                s += 1
            nd = roots[t]
            while feature[nd] >= 0:
                nd = left[nd] if X[i, feature[nd]] <= threshold[nd] else right[nd]
            acc += value[nd]
        while s < stops.shape[0]:
            out[s, i] = base + lr * acc
            s += 1
    return out
