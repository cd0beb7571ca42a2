"""Pure-numpy twins of the compiled kernels.

Same signatures, same (distance, id) ordering contract. Graph kernels keep
their Python-level loops but vectorize every distance evaluation; they are
orders of magnitude slower than the compiled path and exist for portability
and cross-checking.
"""

import bisect

import numpy as np

_CHUNK = 2048


def l2_to_rows(data, q):
    diff = data.astype(np.float64) - np.asarray(q, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff).astype(np.float32)


def assign_nearest(data, centroids):
    n = data.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float32)
    c64 = centroids.astype(np.float64)
    for lo in range(0, n, _CHUNK):
        block = data[lo:lo + _CHUNK].astype(np.float64)
        diff = block[:, None, :] - c64[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff).astype(np.float32)
        lab = np.argmin(d, axis=1)
        labels[lo:lo + _CHUNK] = lab
        dists[lo:lo + _CHUNK] = d[np.arange(d.shape[0]), lab]
    return labels, dists


def centroid_sums(data, labels, k):
    sums = np.zeros((k, data.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, data.astype(np.float64))
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


def sdc_rows(codes, q_code, table):
    m = codes.shape[1]
    sub = np.arange(m)
    vals = table[sub[None, :], np.asarray(q_code)[None, :], codes].astype(np.float64)
    return vals.sum(axis=1).astype(np.float32)


def _sorted_order(ids, dists):
    return np.lexsort((ids, dists))


def _search(data, adj, deg, entries, q, L, io_limit):
    # candidate list kept as sorted [(dist, id)] plus an expanded-id set
    cand = []
    expanded = set()
    seen = set()
    for e in entries:
        e = int(e)
        if e not in seen:
            seen.add(e)
            bisect.insort(cand, (float(l2_to_rows(data[e:e + 1], q)[0]), e))
    del cand[L:]
    vis_id, vis_d = [], []
    while len(vis_id) < io_limit:
        best = next((c for c in cand if c[1] not in expanded), None)
        if best is None:
            break
        d, node = best
        expanded.add(node)
        vis_id.append(node)
        vis_d.append(d)
        nbrs = [int(v) for v in adj[node, :deg[node]] if int(v) not in seen]
        if not nbrs:
            continue
        seen.update(nbrs)
        nd = l2_to_rows(data[nbrs], q)
        for v, dv in zip(nbrs, nd.tolist()):
            if len(cand) == L and (dv, v) >= cand[-1]:
                continue
            bisect.insort(cand, (dv, v))
            if len(cand) > L:
                cand.pop()
    return (np.array(vis_id, dtype=np.int64),
            np.array(vis_d, dtype=np.float32))


def greedy_search(data, adj, deg, entries, q, L, k, io_limit):
    cap = min(io_limit, data.shape[0])
    vis_id, vis_d = _search(data, adj, deg, entries, q, L, cap)
    order = _sorted_order(vis_id, vis_d)[:k]
    return vis_id, vis_d, vis_id[order], vis_d[order]


def robust_prune(data, p, ids, dists, alpha, R):
    ids = np.asarray(ids, dtype=np.int64)
    dists = np.asarray(dists, dtype=np.float32)
    kept = []
    for idx in _sorted_order(ids, dists):
        if len(kept) == R:
            break
        c = int(ids[idx])
        if kept:
            dk = l2_to_rows(data[kept], data[c]).astype(np.float64)
            if not np.all(alpha * dk > np.float64(dists[idx])):
                continue
        kept.append(c)
    return np.array(kept, dtype=np.int64)


def build_vamana(data, R, L, alpha, order, entry, passes, slack):
    n = data.shape[0]
    S = max(slack, R)
    adj = np.full((n, S), -1, dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    entries = np.array([entry], dtype=np.int64)

    def set_row(node, kept):
        adj[node, :] = -1
        adj[node, :len(kept)] = kept
        deg[node] = len(kept)

    def reprune(node, cand, a):
        cd = l2_to_rows(data[cand], data[node])
        set_row(node, robust_prune(data, node, cand, cd, a, R))

    a = 1.0
    for ps in range(passes):
        a = 1.0 if ps == 0 else alpha
        for p in order:
            p = int(p)
            vis_id, vis_d = _search(data, adj, deg, entries, data[p], L, n)
            pool = {int(v): float(d) for v, d in zip(vis_id, vis_d)}
            extra = [int(v) for v in adj[p, :deg[p]] if int(v) not in pool]
            if extra:
                for v, d in zip(extra, l2_to_rows(data[extra], data[p]).tolist()):
                    pool[v] = d
            pool.pop(p, None)
            ids = np.fromiter(pool.keys(), dtype=np.int64, count=len(pool))
            ds = np.fromiter(pool.values(), dtype=np.float32, count=len(pool))
            kept = robust_prune(data, p, ids, ds, a, R)
            set_row(p, kept)
            for nb in kept.tolist():
                row = adj[nb, :deg[nb]]
                if np.any(row == p):
                    continue
                if deg[nb] < S:
                    adj[nb, deg[nb]] = p
                    deg[nb] += 1
                    continue
                reprune(nb, np.append(row, p), a)
    for v in np.flatnonzero(deg > R):
        reprune(int(v), adj[v, :deg[v]].copy(), a)
    return adj[:, :R].copy(), deg
