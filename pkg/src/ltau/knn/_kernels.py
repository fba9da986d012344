"""Numba kernels shared by the flat and HNSW indexes.

Every distance in the package goes through ``sqdist`` so that flat and graph
searches see bit-identical values and break ties the same way (lower id wins).
Heaps are plain arrays of (distance, id) pairs ordered lexicographically.
"""
import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def sqdist(vectors, i, query):
    acc = 0.0
    for d in range(vectors.shape[1]):
        diff = np.float64(vectors[i, d]) - np.float64(query[d])
        acc += diff * diff
    return acc


@njit(cache=True, inline="always")
def sqdist_rows(vectors, i, j):
    acc = 0.0
    for d in range(vectors.shape[1]):
        diff = np.float64(vectors[i, d]) - np.float64(vectors[j, d])
        acc += diff * diff
    return acc


@njit(cache=True, inline="always")
def _before(d1, i1, d2, i2):
    return d1 < d2 or (d1 == d2 and i1 < i2)


# ---------------------------------------------------------------------------
# binary heaps; sign selects min-heap (+1) or max-heap (-1)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _higher(sign, d1, i1, d2, i2):
    if sign > 0:
        return _before(d1, i1, d2, i2)
    return _before(d2, i2, d1, i1)


@njit(cache=True)
def heap_push(hd, hi, size, sign, d, i):
    pos = size
    while pos > 0:
        parent = (pos - 1) >> 1
        if _higher(sign, d, i, hd[parent], hi[parent]):
            hd[pos] = hd[parent]
            hi[pos] = hi[parent]
            pos = parent
        else:
            break
    hd[pos] = d
    hi[pos] = i
    return size + 1


@njit(cache=True)
def heap_pop(hd, hi, size, sign):
    size -= 1
    d = hd[size]
    i = hi[size]
    pos = 0
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _higher(sign, hd[child + 1], hi[child + 1], hd[child], hi[child]):
            child += 1
        if _higher(sign, hd[child], hi[child], d, i):
            hd[pos] = hd[child]
            hi[pos] = hi[child]
            pos = child
        else:
            break
    if size > 0:
        hd[pos] = d
        hi[pos] = i
    return size


@njit(cache=True)
def _sort_pairs(dist, ids, n):
    # insertion sort; n is small (k or a neighbor list)
    for a in range(1, n):
        d = dist[a]
        i = ids[a]
        b = a - 1
        while b >= 0 and _before(d, i, dist[b], ids[b]):
            dist[b + 1] = dist[b]
            ids[b + 1] = ids[b]
            b -= 1
        dist[b + 1] = d
        ids[b + 1] = i


# ---------------------------------------------------------------------------
# brute force
# ---------------------------------------------------------------------------


@njit(cache=True)
def flat_search_one(vectors, query, k, out_d, out_i):
    n = vectors.shape[0]
    hd = np.empty(k, dtype=np.float64)
    hi = np.empty(k, dtype=np.int64)
    size = 0
    for j in range(n):
        d = sqdist(vectors, j, query)
        if size < k:
            size = heap_push(hd, hi, size, -1, d, j)
        elif _before(d, j, hd[0], hi[0]):
            size = heap_pop(hd, hi, size, -1)
            size = heap_push(hd, hi, size, -1, d, j)
    while size > 0:
        out_d[size - 1] = hd[0]
        out_i[size - 1] = hi[0]
        size = heap_pop(hd, hi, size, -1)


@njit(cache=True, parallel=True)
def flat_search_batch(vectors, queries, k):
    q = queries.shape[0]
    out_d = np.empty((q, k), dtype=np.float64)
    out_i = np.empty((q, k), dtype=np.int64)
    for r in prange(q):
        flat_search_one(vectors, queries[r], k, out_d[r], out_i[r])
    return out_d, out_i


# ---------------------------------------------------------------------------
# HNSW graph
#
# links0   (N, 2M)  layer-0 adjacency, counts0 (N,)
# linksU   (S, M)   upper-layer adjacency; node i at layer l >= 1 uses row
#                   offsets[i] + l - 1, countsU (S,)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _row(level, node, offsets):
    return offsets[node] + level - 1


@njit(cache=True)
def _neighbors(level, node, links0, counts0, linksU, countsU, offsets):
    if level == 0:
        return links0[node, : counts0[node]]
    r = offsets[node] + level - 1
    return linksU[r, : countsU[r]]


@njit(cache=True)
def greedy_closest(vectors, query, ep, ep_d, level, links0, counts0, linksU, countsU, offsets):
    changed = True
    while changed:
        changed = False
        nb = _neighbors(level, ep, links0, counts0, linksU, countsU, offsets)
        for t in range(nb.shape[0]):
            c = nb[t]
            d = sqdist(vectors, c, query)
            if _before(d, c, ep_d, ep):
                ep_d = d
                ep = c
                changed = True
    return ep, ep_d


@njit(cache=True)
def search_layer(vectors, query, ep_d, ep_i, n_ep, ef, level,
                 links0, counts0, linksU, countsU, offsets, visited, tag,
                 cand_d, cand_i, res_d, res_i):
    """Beam search on one layer. Returns the number of results in res (max-heap)."""
    nc = 0
    nr = 0
    for t in range(n_ep):
        visited[ep_i[t]] = tag
        nc = heap_push(cand_d, cand_i, nc, 1, ep_d[t], ep_i[t])
        nr = heap_push(res_d, res_i, nr, -1, ep_d[t], ep_i[t])
        if nr > ef:
            nr = heap_pop(res_d, res_i, nr, -1)
    while nc > 0:
        cd = cand_d[0]
        ci = cand_i[0]
        if nr >= ef and _before(res_d[0], res_i[0], cd, ci):
            break
        nc = heap_pop(cand_d, cand_i, nc, 1)
        nb = _neighbors(level, ci, links0, counts0, linksU, countsU, offsets)
        for t in range(nb.shape[0]):
            e = nb[t]
            if visited[e] == tag:
                continue
            visited[e] = tag
            d = sqdist(vectors, e, query)
            if nr < ef or _before(d, e, res_d[0], res_i[0]):
                nc = heap_push(cand_d, cand_i, nc, 1, d, e)
                nr = heap_push(res_d, res_i, nr, -1, d, e)
                if nr > ef:
                    nr = heap_pop(res_d, res_i, nr, -1)
    return nr


@njit(cache=True)
def _select_heuristic(vectors, cd, ci, n, m, out):
    """Keep candidates (sorted ascending) that are closer to the base than to any kept one.

    A list that already fits within ``m`` is kept whole, as in the common reference
    implementations; pruning only starts once there is something to choose between.
    """
    if n < m:
        for a in range(n):
            out[a] = ci[a]
        return n
    kept = 0
    for a in range(n):
        if kept >= m:
            break
        e = ci[a]
        good = True
        for b in range(kept):
            if sqdist_rows(vectors, e, out[b]) < cd[a]:
                good = False
                break
        if good:
            out[kept] = e
            kept += 1
    return kept


@njit(cache=True)
def _add_link(vectors, src, dst, level, m_max, links0, counts0, linksU, countsU, offsets,
              tmp_d, tmp_i, tmp_out):
    if level == 0:
        lk = links0[src]
        cnt = counts0[src]
    else:
        r = offsets[src] + level - 1
        lk = linksU[r]
        cnt = countsU[r]
    for t in range(cnt):
        if lk[t] == dst:
            return
    if cnt < m_max:
        lk[cnt] = dst
        cnt += 1
    else:
        n = 0
        for t in range(cnt):
            tmp_i[n] = lk[t]
            tmp_d[n] = sqdist_rows(vectors, src, lk[t])
            n += 1
        tmp_i[n] = dst
        tmp_d[n] = sqdist_rows(vectors, src, dst)
        n += 1
        _sort_pairs(tmp_d, tmp_i, n)
        cnt = _select_heuristic(vectors, tmp_d, tmp_i, n, m_max, tmp_out)
        for t in range(cnt):
            lk[t] = tmp_out[t]
    if level == 0:
        counts0[src] = cnt
    else:
        countsU[offsets[src] + level - 1] = cnt


@njit(cache=True)
def hnsw_build(vectors, levels, offsets, m, ef_construction):
    n = vectors.shape[0]
    m0 = 2 * m
    n_upper = 0
    for i in range(n):
        n_upper += levels[i]
    links0 = np.full((n, m0), -1, dtype=np.int32)
    counts0 = np.zeros(n, dtype=np.int32)
    linksU = np.full((max(n_upper, 1), m), -1, dtype=np.int32)
    countsU = np.zeros(max(n_upper, 1), dtype=np.int32)

    cap = max(ef_construction, m0) + 2
    visited = np.zeros(n, dtype=np.int64)
    cand_d = np.empty(n + 1, dtype=np.float64)
    cand_i = np.empty(n + 1, dtype=np.int64)
    res_d = np.empty(cap, dtype=np.float64)
    res_i = np.empty(cap, dtype=np.int64)
    ep_d = np.empty(cap, dtype=np.float64)
    ep_i = np.empty(cap, dtype=np.int64)
    sel = np.empty(m0 + 1, dtype=np.int64)
    tmp_d = np.empty(m0 + 2, dtype=np.float64)
    tmp_i = np.empty(m0 + 2, dtype=np.int64)
    tmp_out = np.empty(m0 + 2, dtype=np.int64)

    entry = 0
    max_level = levels[0]
    tag = 0
    for q in range(1, n):
        query = vectors[q]
        lq = levels[q]
        cur = entry
        cur_d = sqdist(vectors, cur, query)
        for lc in range(max_level, lq, -1):
            cur, cur_d = greedy_closest(vectors, query, cur, cur_d, lc,
                                        links0, counts0, linksU, countsU, offsets)
        n_ep = 1
        ep_d[0] = cur_d
        ep_i[0] = cur
        for lc in range(min(lq, max_level), -1, -1):
            tag += 1
            nr = search_layer(vectors, query, ep_d, ep_i, n_ep, ef_construction, lc,
                              links0, counts0, linksU, countsU, offsets, visited, tag,
                              cand_d, cand_i, res_d, res_i)
            # drain max-heap into ascending order
            for t in range(nr - 1, -1, -1):
                ep_d[t] = res_d[0]
                ep_i[t] = res_i[0]
                heap_pop(res_d, res_i, t + 1, -1)
            n_ep = nr
            m_max = m0 if lc == 0 else m
            kept = _select_heuristic(vectors, ep_d, ep_i, nr, m_max, sel)
            for t in range(kept):
                _add_link(vectors, q, sel[t], lc, m_max, links0, counts0, linksU, countsU,
                          offsets, tmp_d, tmp_i, tmp_out)
                _add_link(vectors, sel[t], q, lc, m_max, links0, counts0, linksU, countsU,
                          offsets, tmp_d, tmp_i, tmp_out)
        if lq > max_level:
            max_level = lq
            entry = q
    return links0, counts0, linksU, countsU, entry, max_level


@njit(cache=True)
def reachable_from(entry, links0, counts0):
    n = links0.shape[0]
    seen = np.zeros(n, dtype=np.bool_)
    stack = np.empty(n, dtype=np.int64)
    top = 0
    stack[0] = entry
    top = 1
    seen[entry] = True
    while top > 0:
        top -= 1
        u = stack[top]
        for t in range(counts0[u]):
            v = links0[u, t]
            if not seen[v]:
                seen[v] = True
                stack[top] = v
                top += 1
    return seen


@njit(cache=True)
def repair_connectivity(vectors, entry, links0, counts0):
    """Give every node unreachable at layer 0 an in-link from its closest reachable node
    that still has a free slot. Returns the number of links added."""
    n = vectors.shape[0]
    m0 = links0.shape[1]
    added = 0
    seen = reachable_from(entry, links0, counts0)
    stack = np.empty(n, dtype=np.int64)
    for u in range(n):
        if seen[u]:
            continue
        best = -1
        best_d = np.inf
        for v in range(n):
            if seen[v] and counts0[v] < m0:
                d = sqdist_rows(vectors, u, v)
                if _before(d, v, best_d, best):
                    best_d = d
                    best = v
        if best < 0:
            # every reachable node is full; overwrite the farthest link of u's nearest reachable node
            for v in range(n):
                if seen[v]:
                    d = sqdist_rows(vectors, u, v)
                    if _before(d, v, best_d, best):
                        best_d = d
                        best = v
            far = 0
            far_d = -1.0
            for t in range(counts0[best]):
                d = sqdist_rows(vectors, best, links0[best, t])
                if d > far_d:
                    far_d = d
                    far = t
            links0[best, far] = u
        else:
            links0[best, counts0[best]] = u
            counts0[best] += 1
        added += 1
        # mark everything newly reachable through u
        seen[u] = True
        stack[0] = u
        top = 1
        while top > 0:
            top -= 1
            a = stack[top]
            for t in range(counts0[a]):
                b = links0[a, t]
                if not seen[b]:
                    seen[b] = True
                    stack[top] = b
                    top += 1
    return added


@njit(cache=True)
def hnsw_search_one(vectors, query, k, ef, entry, max_level,
                    links0, counts0, linksU, countsU, offsets,
                    visited, tag, cand_d, cand_i, res_d, res_i, out_d, out_i):
    cur = entry
    cur_d = sqdist(vectors, cur, query)
    for lc in range(max_level, 0, -1):
        cur, cur_d = greedy_closest(vectors, query, cur, cur_d, lc,
                                    links0, counts0, linksU, countsU, offsets)
    ep_d = np.empty(1, dtype=np.float64)
    ep_i = np.empty(1, dtype=np.int64)
    ep_d[0] = cur_d
    ep_i[0] = cur
    nr = search_layer(vectors, query, ep_d, ep_i, 1, ef, 0,
                      links0, counts0, linksU, countsU, offsets, visited, tag,
                      cand_d, cand_i, res_d, res_i)
    while nr > k:
        nr = heap_pop(res_d, res_i, nr, -1)
    got = nr
    for t in range(nr - 1, -1, -1):
        out_d[t] = res_d[0]
        out_i[t] = res_i[0]
        heap_pop(res_d, res_i, t + 1, -1)
    return got


@njit(cache=True, parallel=True)
def hnsw_search_batch(vectors, queries, k, ef, entry, max_level,
                      links0, counts0, linksU, countsU, offsets):
    n = vectors.shape[0]
    q = queries.shape[0]
    kk = min(k, n)
    out_d = np.full((q, kk), np.inf, dtype=np.float64)
    out_i = np.full((q, kk), -1, dtype=np.int64)
    got = np.zeros(q, dtype=np.int64)
    # one scratch set per chunk keeps results independent of the thread count
    n_chunks = min(q, 64)
    bounds = np.linspace(0, q, n_chunks + 1).astype(np.int64)
    for c in prange(n_chunks):
        visited = np.zeros(n, dtype=np.int64)
        cand_d = np.empty(n + 1, dtype=np.float64)
        cand_i = np.empty(n + 1, dtype=np.int64)
        res_d = np.empty(ef + 2, dtype=np.float64)
        res_i = np.empty(ef + 2, dtype=np.int64)
        for r in range(bounds[c], bounds[c + 1]):
            got[r] = hnsw_search_one(vectors, queries[r], kk, ef, entry, max_level,
                                     links0, counts0, linksU, countsU, offsets,
                                     visited, r + 1, cand_d, cand_i, res_d, res_i,
                                     out_d[r], out_i[r])
    return out_d, out_i, got
