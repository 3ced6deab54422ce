"""Graph containers, adjacency normalizations, bounded hop distances and
neighborhood label statistics.

All containers are immutable after construction (numpy buffers are marked
read-only), so they can be shared freely across parallel experiment runs.
Sparse matrices are stored in CSR form with sorted column indices, which makes
every downstream computation bit-reproducible.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from goodlab._kernels import bounded_hop_pairs

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}
SPLIT_CODES = {v: k for k, v in SPLIT_NAMES.items()}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class CSRMatrix:
    """Minimal CSR matrix (square, float64 data, sorted column indices)."""

    def __init__(self, num_nodes, indptr, indices, data):
        self.shape = (num_nodes, num_nodes)
        self.indptr = _frozen(np.asarray(indptr, dtype=np.int64))
        self.indices = _frozen(np.asarray(indices, dtype=np.int64))
        self.data = _frozen(np.asarray(data, dtype=np.float64))
        self._rows = _frozen(np.repeat(np.arange(num_nodes, dtype=np.int64), np.diff(self.indptr)))

    @property
    def nnz(self) -> int:
        return self.data.shape[0]

    @property
    def coo(self):
        return self._rows, self.indices, self.data

    def matmat(self, dense: np.ndarray) -> np.ndarray:
        """Sparse @ dense for dense of shape (n,) or (n, k).

        Row segments are reduced with the same reduceat path as the tape's
        sparse_dense_matmul, so both routes are bit-identical.
        """
        vec = dense.ndim == 1
        b = dense[:, None] if vec else dense
        out = np.zeros((self.shape[0], b.shape[1]), dtype=np.float64)
        if self.nnz:
            uniq, starts = np.unique(self._rows, return_index=True)
            out[uniq] += np.add.reduceat(self.data[:, None] * b[self.indices], starts, axis=0)
        return out[:, 0] if vec else out

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float64)
        out[self._rows, self.indices] = self.data
        return out


def csr_from_entries(num_nodes, rows, cols, data):
    """Build a CSRMatrix from COO entries; duplicates are summed."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    data = np.asarray(data, dtype=np.float64)
    order = np.lexsort((cols, rows))
    rows, cols, data = rows[order], cols[order], data[order]
    if rows.size:
        key = rows * num_nodes + cols
        uniq, inverse = np.unique(key, return_inverse=True)
        summed = np.zeros(uniq.shape[0], dtype=np.float64)
        np.add.at(summed, inverse, data)
        rows, cols, data = uniq // num_nodes, uniq % num_nodes, summed
    counts = np.bincount(rows, minlength=num_nodes)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return CSRMatrix(num_nodes, indptr, cols, data)


@dataclass(frozen=True)
class Graph:
    """Immutable node-labeled, environment-labeled undirected graph.

    `edges` holds each undirected edge once with u < v. `envs` uses -1 for
    unknown environment; `split` holds TRAIN/VAL/TEST codes.
    """

    num_nodes: int
    num_classes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    envs: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "edges", _frozen(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)))
        object.__setattr__(self, "features", _frozen(np.asarray(self.features, dtype=np.float64)))
        object.__setattr__(self, "labels", _frozen(np.asarray(self.labels, dtype=np.int64)))
        object.__setattr__(self, "envs", _frozen(np.asarray(self.envs, dtype=np.int64)))
        object.__setattr__(self, "split", _frozen(np.asarray(self.split, dtype=np.int64)))
        self.validate()

    def validate(self):
        n, e = self.num_nodes, self.edges
        if e.size:
            if e.min() < 0 or e.max() >= n:
                raise ValueError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self-loops are not allowed")
            if np.any(e[:, 0] > e[:, 1]):
                raise ValueError("edges must be stored with u < v")
            key = e[:, 0] * n + e[:, 1]
            if np.unique(key).shape[0] != key.shape[0]:
                raise ValueError("duplicate edges")
        for name, arr in (("features", self.features), ("labels", self.labels),
                          ("envs", self.envs), ("split", self.split)):
            if arr.shape[0] != n:
                raise ValueError(f"{name} must have {n} rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.split.size and not np.isin(self.split, [TRAIN, VAL, TEST]).all():
            raise ValueError("split values must be train/val/test")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def degrees(self) -> np.ndarray:
        d = np.zeros(self.num_nodes, dtype=np.int64)
        if self.edges.size:
            np.add.at(d, self.edges[:, 0], 1)
            np.add.at(d, self.edges[:, 1], 1)
        return d

    def split_indices(self, code: int) -> np.ndarray:
        return np.flatnonzero(self.split == code)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """The three adjacency normalizations used throughout.

    bar_a[i, j] = 1/sqrt((d_i+1)(d_j+1)) on edges; tilde_a adds the normalized
    self-loop diagonal 1/(d_i+1); row_norm_a divides each row of A by the node
    degree (zero row for isolated nodes).
    """

    bar_a: CSRMatrix
    tilde_a: CSRMatrix
    row_norm_a: CSRMatrix


def _sym_edge_arrays(edges: np.ndarray):
    if edges.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    u, v = edges[:, 0], edges[:, 1]
    return np.concatenate([u, v]), np.concatenate([v, u])


def build_normalized(graph: Graph) -> NormalizedAdjacency:
    """Adjacency normalizations of an unweighted graph."""
    w = np.ones(graph.edges.shape[0], dtype=np.float64)
    return normalized_from_edge_weights(graph.num_nodes, graph.edges, w)


def normalized_from_edge_weights(num_nodes: int, edges: np.ndarray, weights: np.ndarray) -> NormalizedAdjacency:
    """Adjacency normalizations of an edge-weighted graph.

    `weights` aligns with `edges` (one entry per undirected edge); degrees are
    weighted degrees, so with all-ones weights the result is bit-identical to
    `build_normalized`.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64)
    rows, cols = _sym_edge_arrays(edges)
    w2 = np.concatenate([weights, weights]) if weights.size else weights
    deg = np.zeros(num_nodes, dtype=np.float64)
    np.add.at(deg, rows, w2)
    inv_sqrt = 1.0 / np.sqrt(deg + 1.0)
    bar = csr_from_entries(num_nodes, rows, cols, w2 * inv_sqrt[rows] * inv_sqrt[cols])
    diag = np.arange(num_nodes, dtype=np.int64)
    tilde = csr_from_entries(
        num_nodes,
        np.concatenate([rows, diag]),
        np.concatenate([cols, diag]),
        np.concatenate([w2 * inv_sqrt[rows] * inv_sqrt[cols], inv_sqrt[diag] ** 2]),
    )
    inv_deg = np.zeros(num_nodes, dtype=np.float64)
    nz = deg > 0
    inv_deg[nz] = 1.0 / deg[nz]
    row_norm = csr_from_entries(num_nodes, rows, cols, w2 * inv_deg[rows])
    return NormalizedAdjacency(bar_a=bar, tilde_a=tilde, row_norm_a=row_norm)


@dataclass(frozen=True)
class HopDistanceTable:
    """Sparse map (i, j) -> hop distance d(i, j) for i != j and d <= max_hops.

    Pairs are stored once with i < j; lookups canonicalize order, so the table
    is symmetric. The diagonal is excluded: alignment pair sets require
    i != j, so self-distances are never stored.
    """

    num_nodes: int
    max_hops: int
    rows: np.ndarray
    cols: np.ndarray
    dists: np.ndarray
    _keys: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "rows", _frozen(np.asarray(self.rows, dtype=np.int64)))
        object.__setattr__(self, "cols", _frozen(np.asarray(self.cols, dtype=np.int64)))
        object.__setattr__(self, "dists", _frozen(np.asarray(self.dists, dtype=np.int64)))
        object.__setattr__(self, "_keys", _frozen(self.rows * self.num_nodes + self.cols))

    @property
    def num_pairs(self) -> int:
        return self.rows.shape[0]

    def lookup(self, i, j):
        """Vectorized distance lookup; -1 where the pair is beyond max_hops."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        key = lo * self.num_nodes + hi
        pos = np.searchsorted(self._keys, key)
        pos = np.clip(pos, 0, max(self._keys.shape[0] - 1, 0))
        out = np.full(key.shape, -1, dtype=np.int64)
        if self._keys.shape[0]:
            hit = self._keys[pos] == key
            out[hit] = self.dists[pos[hit]]
        return out


def bounded_shortest_paths(graph: Graph, max_hops: int) -> HopDistanceTable:
    """BFS-exact hop distances up to max_hops for every unordered pair."""
    adj = csr_from_entries(graph.num_nodes, *_sym_edge_arrays(graph.edges),
                           np.ones(2 * graph.edges.shape[0]))
    return bounded_paths_from_csr(graph.num_nodes, adj.indptr, adj.indices, max_hops)


def bounded_paths_from_csr(num_nodes: int, indptr, indices, max_hops: int) -> HopDistanceTable:
    if max_hops < 1:
        raise ValueError("max_hops must be >= 1")
    rows, cols, dists = bounded_hop_pairs(
        np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64), int(max_hops)
    )
    return HopDistanceTable(num_nodes=num_nodes, max_hops=max_hops, rows=rows, cols=cols, dists=dists)


@dataclass(frozen=True)
class NeighborhoodProfile:
    """Per-node class ratios after `depth` row-normalized propagation steps."""

    ratios: np.ndarray
    depth: int

    def __post_init__(self):
        object.__setattr__(self, "ratios", _frozen(np.asarray(self.ratios, dtype=np.float64)))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def neighborhood_label_distribution(graph: Graph, adj: NormalizedAdjacency, depth: int) -> NeighborhoodProfile:
    """R = (row_norm_a)^depth @ OneHot(labels), by repeated multiplication."""
    return profile_from_row_norm(adj.row_norm_a, graph.labels, graph.num_classes, depth)


def profile_from_row_norm(row_norm: CSRMatrix, labels, num_classes: int, depth: int) -> NeighborhoodProfile:
    r = one_hot(np.asarray(labels, dtype=np.int64), num_classes)
    for _ in range(depth):
        r = row_norm.matmat(r)
    return NeighborhoodProfile(ratios=r, depth=depth)


def ratio_discrepancies(profile: NeighborhoodProfile, labels, i: int, j: int, c: int):
    """(r_same, r_diff) for a same-class pair.

    r_same = |R[i, c] - R[j, c]|; r_diff = sum over other classes c' of
    |R[i, c'] - R[j, c']|. Raises if the nodes are not both of class c.
    """
    labels = np.asarray(labels)
    if labels[i] != c or labels[j] != c:
        raise ValueError(f"nodes {i}, {j} are not both of class {c}")
    diff = np.abs(profile.ratios[i] - profile.ratios[j])
    r_same = diff[c]
    return float(r_same), float(diff.sum() - r_same)


# ---------------------------------------------------------------------------
# Dataset directory format
# ---------------------------------------------------------------------------

META, EDGES, FEATURES, LABELS, ENVS, SPLITS = (
    "meta.json", "edges.tsv", "features.tsv", "labels.tsv", "envs.tsv", "splits.tsv")


def save_dataset(graph: Graph, out_dir: str) -> None:
    """Write a graph to the on-disk dataset directory format."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {"num_nodes": graph.num_nodes, "num_classes": graph.num_classes,
            "feature_dim": graph.feature_dim}
    _write(out_dir, META, json.dumps(meta, sort_keys=True) + "\n")
    order = np.lexsort((graph.edges[:, 1], graph.edges[:, 0])) if graph.edges.size else []
    _write(out_dir, EDGES, "".join(f"{u}\t{v}\n" for u, v in graph.edges[order]))
    _write(out_dir, FEATURES, "".join("\t".join(repr(float(x)) for x in row) + "\n" for row in graph.features))
    _write(out_dir, LABELS, "".join(f"{x}\n" for x in graph.labels))
    _write(out_dir, ENVS, "".join(f"{x}\n" for x in graph.envs))
    _write(out_dir, SPLITS, "".join(SPLIT_NAMES[int(x)] + "\n" for x in graph.split))


def load_dataset(data_dir: str) -> Graph:
    with open(os.path.join(data_dir, META), encoding="utf-8") as fh:
        meta = json.load(fh)
    n = meta["num_nodes"]
    edges = np.loadtxt(os.path.join(data_dir, EDGES), dtype=np.int64, ndmin=2) \
        if os.path.getsize(os.path.join(data_dir, EDGES)) else np.empty((0, 2), dtype=np.int64)
    features = np.loadtxt(os.path.join(data_dir, FEATURES), dtype=np.float64, ndmin=2)
    if features.shape != (n, meta["feature_dim"]):
        features = features.reshape(n, meta["feature_dim"])
    labels = np.loadtxt(os.path.join(data_dir, LABELS), dtype=np.int64, ndmin=1)
    envs = np.loadtxt(os.path.join(data_dir, ENVS), dtype=np.int64, ndmin=1)
    with open(os.path.join(data_dir, SPLITS), encoding="utf-8") as fh:
        split = np.array([SPLIT_CODES[line.strip()] for line in fh if line.strip()], dtype=np.int64)
    return Graph(num_nodes=n, num_classes=meta["num_classes"], edges=edges,
                 features=features, labels=labels, envs=envs, split=split)


def _write(out_dir: str, name: str, text: str) -> None:
    with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
