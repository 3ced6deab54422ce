"""Pure-numpy fallback for the bounded shortest-path kernel.

Level-synchronous BFS from every source, truncated at `max_hops`. Matches the
compiled kernel exactly; it is selected at import time when the extension is
unavailable (see goodlab._kernels.__init__).
"""

import numpy as np

IMPL = "numpy"


def bounded_hop_pairs(indptr, indices, max_hops):
    """All unordered pairs (i, j), i < j, with hop distance d(i, j) <= max_hops.

    Parameters are CSR arrays of an undirected graph (both edge directions
    present, no self-loops). Returns (rows, cols, dists) with rows < cols,
    sorted lexicographically by (row, col).
    """
    n = indptr.shape[0] - 1
    rows_out = []
    cols_out = []
    dist_out = []
    seen = np.zeros(n, dtype=bool)
    for src in range(n):
        seen[:] = False
        seen[src] = True
        frontier = indices[indptr[src] : indptr[src + 1]]
        frontier = frontier[~seen[frontier]]
        depth = 1
        while frontier.size and depth <= max_hops:
            frontier = np.unique(frontier)
            seen[frontier] = True
            above = frontier[frontier > src]
            rows_out.append(np.full(above.shape[0], src, dtype=np.int64))
            cols_out.append(above.astype(np.int64))
            dist_out.append(np.full(above.shape[0], depth, dtype=np.int64))
            if depth == max_hops:
                break
            nxt = np.concatenate(
                [indices[indptr[v] : indptr[v + 1]] for v in frontier]
            ) if frontier.size else np.empty(0, dtype=indices.dtype)
            frontier = nxt[~seen[nxt]]
            depth += 1
    if not rows_out:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    rows = np.concatenate(rows_out)
    cols = np.concatenate(cols_out)
    dists = np.concatenate(dist_out)
    order = np.lexsort((cols, rows))
    return rows[order], cols[order], dists[order]
