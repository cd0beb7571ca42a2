"""Numba-compiled hot loops.

Every kernel here has a twin in ``numpy_kernels`` with the same signature and
the same ordering contract: all candidate orderings are by (distance, id)
ascending, distances are accumulated in float64 and returned as float32.
"""

import numpy as np
from numba import njit

_CACHE = True


@njit(cache=_CACHE, inline="always")
def _l2(x, y):
    # four interleaved float64 partial sums, combined in a fixed order
    d = x.shape[0]
    a0 = 0.0
    a1 = 0.0
    a2 = 0.0
    a3 = 0.0
    j = 0
    while j + 4 <= d:
        e0 = np.float64(x[j]) - np.float64(y[j])
        e1 = np.float64(x[j + 1]) - np.float64(y[j + 1])
        e2 = np.float64(x[j + 2]) - np.float64(y[j + 2])
        e3 = np.float64(x[j + 3]) - np.float64(y[j + 3])
        a0 += e0 * e0
        a1 += e1 * e1
        a2 += e2 * e2
        a3 += e3 * e3
        j += 4
    while j < d:
        e0 = np.float64(x[j]) - np.float64(y[j])
        a0 += e0 * e0
        j += 1
    return np.float32((a0 + a1) + (a2 + a3))


@njit(cache=_CACHE, inline="always")
def _row_l2(data, i, q):
    return _l2(data[i], q)


@njit(cache=_CACHE, inline="always")
def _rows_l2(data, i, k):
    return _l2(data[i], data[k])


@njit(cache=_CACHE)
def l2_to_rows(data, q):
    n = data.shape[0]
    out = np.empty(n, dtype=np.float32)
    for i in range(n):
        out[i] = _row_l2(data, i, q)
    return out


@njit(cache=_CACHE)
def assign_nearest(data, centroids):
    n = data.shape[0]
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float32)
    for i in range(n):
        best = 0
        best_d = np.inf
        for c in range(k):
            d = _l2(data[i], centroids[c])
            if d < best_d:
                best_d = d
                best = c
        labels[i] = best
        dists[i] = best_d
    return labels, dists


@njit(cache=_CACHE)
def centroid_sums(data, labels, k):
    sums = np.zeros((k, data.shape[1]), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for i in range(data.shape[0]):
        c = labels[i]
        counts[c] += 1
        for j in range(data.shape[1]):
            sums[c, j] += data[i, j]
    return sums, counts


@njit(cache=_CACHE)
def sdc_rows(codes, q_code, table):
    n = codes.shape[0]
    m = codes.shape[1]
    out = np.empty(n, dtype=np.float32)
    for i in range(n):
        acc = 0.0
        for s in range(m):
            acc += np.float64(table[s, q_code[s], codes[i, s]])
        out[i] = np.float32(acc)
    return out


@njit(cache=_CACHE, inline="always")
def _less(da, ia, db, ib):
    return da < db or (da == db and ia < ib)


@njit(cache=_CACHE)
def _insert(cid, cd, cexp, size, cap, nid, nd):
    if size == cap:
        if not _less(nd, nid, cd[cap - 1], cid[cap - 1]):
            return size
        size -= 1
    i = size
    while i > 0 and _less(nd, nid, cd[i - 1], cid[i - 1]):
        cid[i] = cid[i - 1]
        cd[i] = cd[i - 1]
        cexp[i] = cexp[i - 1]
        i -= 1
    cid[i] = nid
    cd[i] = nd
    cexp[i] = False
    return size + 1


@njit(cache=_CACHE)
def _search(data, adj, deg, entries, q, L, io_limit, seen, stamp, cid, cd, cexp, vis_id, vis_d):
    size = 0
    for e in entries:
        if seen[e] != stamp:
            seen[e] = stamp
            size = _insert(cid, cd, cexp, size, L, e, _row_l2(data, e, q))
    nvis = 0
    while nvis < io_limit:
        best = -1
        for i in range(size):
            if not cexp[i]:
                best = i
                break
        if best < 0:
            break
        cexp[best] = True
        node = cid[best]
        vis_id[nvis] = node
        vis_d[nvis] = cd[best]
        nvis += 1
        for j in range(deg[node]):
            nb = adj[node, j]
            if seen[nb] == stamp:
                continue
            seen[nb] = stamp
            size = _insert(cid, cd, cexp, size, L, nb, _row_l2(data, nb, q))
    return nvis


@njit(cache=_CACHE)
def _sorted_order(ids, dists):
    by_id = np.argsort(ids)
    by_d = np.argsort(dists[by_id], kind="mergesort")
    return by_id[by_d]


@njit(cache=_CACHE)
def greedy_search(data, adj, deg, entries, q, L, k, io_limit):
    """Best-first beam search; returns (visited ids, visited dists, result ids, result dists)."""
    n = data.shape[0]
    cap = min(io_limit, n)
    seen = np.zeros(n, dtype=np.int32)
    cid = np.empty(L, dtype=np.int64)
    cd = np.empty(L, dtype=np.float32)
    cexp = np.zeros(L, dtype=np.bool_)
    vis_id = np.empty(cap, dtype=np.int64)
    vis_d = np.empty(cap, dtype=np.float32)
    nvis = _search(data, adj, deg, entries, q, L, cap, seen, 1, cid, cd, cexp, vis_id, vis_d)
    vis_id = vis_id[:nvis]
    vis_d = vis_d[:nvis]
    order = _sorted_order(vis_id, vis_d)[:k]
    return vis_id, vis_d, vis_id[order], vis_d[order]


@njit(cache=_CACHE)
def _prune_into(data, p, ids, dists, alpha, R, out):
    order = _sorted_order(ids, dists)
    nk = 0
    for idx in order:
        c = ids[idx]
        dpc = np.float64(dists[idx])
        keep = True
        for j in range(nk):
            if not (alpha * np.float64(_rows_l2(data, out[j], c)) > dpc):
                keep = False
                break
        if keep:
            out[nk] = c
            nk += 1
            if nk == R:
                break
    return nk


@njit(cache=_CACHE)
def robust_prune(data, p, ids, dists, alpha, R):
    out = np.empty(R, dtype=np.int64)
    nk = _prune_into(data, p, ids, dists, alpha, R, out)
    return out[:nk]


@njit(cache=_CACHE)
def _set_row(adj, deg, node, kept, nk):
    for t in range(nk):
        adj[node, t] = kept[t]
    for t in range(nk, adj.shape[1]):
        adj[node, t] = -1
    deg[node] = nk


@njit(cache=_CACHE)
def build_vamana(data, R, L, alpha, order, entry, passes, slack):
    """Incremental build; nodes may hold up to ``slack`` edges between prunes.

    A back-edge that would push a node past ``slack`` triggers an immediate
    prune of that node down to ``R``; a final sweep prunes every node still
    above ``R``. Returns (adj, deg) with adj of width ``R``.
    """
    n = data.shape[0]
    S = max(slack, R)
    adj = np.full((n, S), -1, dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=np.int32)
    marks = np.zeros(n, dtype=np.int32)
    cid = np.empty(L, dtype=np.int64)
    cd = np.empty(L, dtype=np.float32)
    cexp = np.zeros(L, dtype=np.bool_)
    vis_id = np.empty(n, dtype=np.int64)
    vis_d = np.empty(n, dtype=np.float32)
    pool_id = np.empty(n + S + 1, dtype=np.int64)
    pool_d = np.empty(n + S + 1, dtype=np.float32)
    kept = np.empty(R, dtype=np.int64)
    kept2 = np.empty(R, dtype=np.int64)
    entries = np.array([entry], dtype=np.int64)
    stamp = 0
    mark = 0
    a = 1.0
    for ps in range(passes):
        a = 1.0 if ps == 0 else alpha
        for p in order:
            stamp += 1
            nvis = _search(data, adj, deg, entries, data[p], L, n, seen, stamp,
                           cid, cd, cexp, vis_id, vis_d)
            mark += 1
            marks[p] = mark
            np_ = 0
            for i in range(nvis):
                v = vis_id[i]
                if marks[v] != mark:
                    marks[v] = mark
                    pool_id[np_] = v
                    pool_d[np_] = vis_d[i]
                    np_ += 1
            for j in range(deg[p]):
                v = adj[p, j]
                if marks[v] != mark:
                    marks[v] = mark
                    pool_id[np_] = v
                    pool_d[np_] = _rows_l2(data, p, v)
                    np_ += 1
            nk = _prune_into(data, p, pool_id[:np_], pool_d[:np_], a, R, kept)
            _set_row(adj, deg, p, kept, nk)
            for j in range(nk):
                nb = kept[j]
                present = False
                for t in range(deg[nb]):
                    if adj[nb, t] == p:
                        present = True
                        break
                if present:
                    continue
                if deg[nb] < S:
                    adj[nb, deg[nb]] = p
                    deg[nb] += 1
                    continue
                m = deg[nb]
                for t in range(m):
                    pool_id[t] = adj[nb, t]
                    pool_d[t] = _rows_l2(data, nb, adj[nb, t])
                pool_id[m] = p
                pool_d[m] = _rows_l2(data, nb, p)
                nk2 = _prune_into(data, nb, pool_id[:m + 1], pool_d[:m + 1], a, R, kept2)
                _set_row(adj, deg, nb, kept2, nk2)
    for v in range(n):
        m = deg[v]
        if m > R:
            for t in range(m):
                pool_id[t] = adj[v, t]
                pool_d[t] = _rows_l2(data, v, adj[v, t])
            nk2 = _prune_into(data, v, pool_id[:m], pool_d[:m], a, R, kept2)
            _set_row(adj, deg, v, kept2, nk2)
    return adj[:, :R].copy(), deg
