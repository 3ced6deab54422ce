# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled bounded shortest-path kernel.

Level-synchronous BFS from every source node, truncated at max_hops. Emits
unordered pairs (i, j) with i < j and their hop distance, sorted by (i, j).
Semantics identical to goodlab._kernels.fallback.bounded_hop_pairs.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

IMPL = "cython"


def bounded_hop_pairs(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices, long max_hops):
    cdef long n = indptr.shape[0] - 1
    cdef cnp.int64_t[::1] frontier = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] nxt = np.empty(n, dtype=np.int64)
    # visited stamps avoid clearing a boolean array between sources
    cdef cnp.int64_t[::1] stamp = np.full(n, -1, dtype=np.int64)
    rows_list = []
    cols_list = []
    dist_list = []
    cdef long src, depth, fsize, nsize, fi, v, e, u, out_n
    cdef long cap = 4096
    cdef cnp.int64_t[::1] out_cols = np.empty(cap, dtype=np.int64)
    cdef cnp.int64_t[::1] out_dist = np.empty(cap, dtype=np.int64)
    for src in range(n):
        out_n = 0
        stamp[src] = src
        frontier[0] = src
        fsize = 1
        depth = 0
        while fsize > 0 and depth < max_hops:
            depth += 1
            nsize = 0
            for fi in range(fsize):
                v = frontier[fi]
                for e in range(indptr[v], indptr[v + 1]):
                    u = indices[e]
                    if stamp[u] != src:
                        stamp[u] = src
                        nxt[nsize] = u
                        nsize += 1
                        if u > src:
                            if out_n == cap:
                                cap *= 2
                                tmp_c = np.empty(cap, dtype=np.int64)
                                tmp_d = np.empty(cap, dtype=np.int64)
                                tmp_c[:out_n] = out_cols[:out_n]
                                tmp_d[:out_n] = out_dist[:out_n]
                                out_cols = tmp_c
                                out_dist = tmp_d
                            out_cols[out_n] = u
                            out_dist[out_n] = depth
                            out_n += 1
            frontier, nxt = nxt, frontier
            fsize = nsize
        if out_n > 0:
            cols_arr = np.asarray(out_cols[:out_n]).copy()
            dist_arr = np.asarray(out_dist[:out_n]).copy()
            order = np.argsort(cols_arr, kind="stable")
            rows_list.append(np.full(out_n, src, dtype=np.int64))
            cols_list.append(cols_arr[order])
            dist_list.append(dist_arr[order])
    if not rows_list:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    return (
        np.concatenate(rows_list),
        np.concatenate(cols_list),
        np.concatenate(dist_list),
    )
