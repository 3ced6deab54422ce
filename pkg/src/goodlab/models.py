"""Models: the analyzed scalar-parameter linear GNN, message-passing GNNs
(GCN-style and single-head attention), and the soft edge-mask extractor.

Layer semantics of the analyzed GNN. Each lower layer mixes an aggregation
operator and a self operator with two scalars per branch:

    H <- agg_weight * (A_tilde - I) @ H + self_weight * H

so scalars (1, 1) apply the self-looped normalized propagation A_tilde
exactly, (0, 1) the identity, and (0, 0) kill the branch. With this
convention the optimal parameter set reproduces the depth-k aggregation
A_tilde^k @ X1 exactly and the failure set leaves the spurious input
untouched, which is what the closed-form analyses require.
"""

import json
from dataclasses import dataclass

import numpy as np

from goodlab import tape
from goodlab.graphs import CSRMatrix, Graph
from goodlab.tape import Value

# ---------------------------------------------------------------------------
# Graph structure tensors shared by the models
# ---------------------------------------------------------------------------


class GraphTensors:
    """Fixed index structure of one (sub)graph, reused across epochs.

    Holds the directed expansion of the undirected edge list plus the CSR
    ordering used by attention softmax. Values (weights) live elsewhere so the
    same structure serves masked and unmasked adjacencies.
    """

    def __init__(self, num_nodes: int, edges: np.ndarray):
        self.n = int(num_nodes)
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        u, v = self.edges[:, 0], self.edges[:, 1]
        diag = np.arange(self.n, dtype=np.int64)
        self.dir_src = np.concatenate([u, v])
        self.dir_dst = np.concatenate([v, u])
        self.tilde_rows = np.concatenate([self.dir_src, diag])
        self.tilde_cols = np.concatenate([self.dir_dst, diag])
        self.edge_index_dup = np.concatenate([np.arange(len(u)), np.arange(len(u))])
        order = np.lexsort((self.dir_dst, self.dir_src))
        self.att_order = order
        self.att_src = self.dir_src[order]
        self.att_dst = self.dir_dst[order]
        self.att_edge_index = self.edge_index_dup[order]
        counts = np.bincount(self.att_src, minlength=self.n)
        self.att_indptr = np.concatenate([[0], np.cumsum(counts)])

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]


def masked_tilde_values(gt: GraphTensors, edge_weights) -> Value:
    """Differentiable values of the normalized adjacency with self-loops for
    an edge-weighted graph, aligned with (gt.tilde_rows, gt.tilde_cols).

    Weighted degrees feed the symmetric normalization, so all-ones weights
    reproduce the unweighted normalization bit-exactly.
    """
    w = tape.as_value(edge_weights)
    e = gt.num_edges
    deg = tape.add(tape.segment_sum(w, gt.edges[:, 0], gt.n),
                   tape.segment_sum(w, gt.edges[:, 1], gt.n))
    inv_sqrt = tape.powc(tape.add(deg, Value(np.ones(gt.n))), -0.5)
    w_dir = tape.gather_rows(w, gt.edge_index_dup) if e else Value(np.zeros(0))
    off = tape.hadamard(w_dir, tape.hadamard(tape.gather_rows(inv_sqrt, gt.dir_src),
                                             tape.gather_rows(inv_sqrt, gt.dir_dst)))
    diag = tape.hadamard(inv_sqrt, inv_sqrt)
    return tape.concat1d([off, diag])


def unmasked_tilde_values(gt: GraphTensors) -> np.ndarray:
    return masked_tilde_values(gt, np.ones(gt.num_edges)).data


def row_norm_from_weights(gt: GraphTensors, edge_weights: np.ndarray) -> CSRMatrix:
    """Row-normalized weighted adjacency as a constant (no gradient)."""
    from goodlab.graphs import normalized_from_edge_weights
    return normalized_from_edge_weights(gt.n, gt.edges, np.asarray(edge_weights)).row_norm_a


# ---------------------------------------------------------------------------
# The analyzed linear GNN
# ---------------------------------------------------------------------------


@dataclass
class TheoryGnnParams:
    """Scalar parameter set of the analyzed GNN.

    `lower` has shape (L-1, 4) with columns (inv_agg, inv_self, sp_agg,
    sp_self); row 0 is the bottom layer. `theta1`/`theta2` weigh the two
    branch outputs.
    """

    theta1: float
    theta2: float
    lower: np.ndarray
    depth: int

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64).reshape(self.depth - 1, 4)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not (np.isfinite(self.lower).all() and np.isfinite([self.theta1, self.theta2]).all()):
            raise ValueError("parameters must be finite")

    def flat(self) -> np.ndarray:
        return np.concatenate([[self.theta1, self.theta2], self.lower.reshape(-1)])

    @staticmethod
    def from_flat(flat: np.ndarray, depth: int) -> "TheoryGnnParams":
        flat = np.asarray(flat, dtype=np.float64)
        return TheoryGnnParams(theta1=float(flat[0]), theta2=float(flat[1]),
                               lower=flat[2:].reshape(depth - 1, 4), depth=depth)


def optimal_theory_params(k: int, depth: int) -> TheoryGnnParams:
    """The optimal invariant parameter set for causal depth k.

    The invariant branch applies the normalized propagation k times and the
    identity below; the spurious branch is killed both at the head (theta2=0)
    and inside the network (bottom spurious layer zeroed), which is the
    variant that is stationary for the ERM term as well.
    """
    if not 1 <= k <= depth - 1:
        raise ValueError("need 1 <= k <= depth-1 to realize a depth-k aggregation")
    lower = np.tile([0.0, 1.0, 0.0, 1.0], (depth - 1, 1))
    lower[depth - 1 - k:, 0] = 1.0  # top k layers aggregate on the invariant branch
    lower[depth - 1 - k:, 1] = 1.0
    lower[0, 2:] = 0.0  # spurious branch zeroed at the bottom layer
    return TheoryGnnParams(theta1=1.0, theta2=0.0, lower=lower, depth=depth)


def failure_theory_params(s: int, depth: int, theta1: float, theta2: float) -> TheoryGnnParams:
    """Lower layers pinned to the failure configuration with learned depth s:
    invariant branch aggregates s times, spurious branch is the identity."""
    if not 1 <= s <= depth - 1:
        raise ValueError("need 1 <= s <= depth-1")
    lower = np.tile([0.0, 1.0, 0.0, 1.0], (depth - 1, 1))
    lower[depth - 1 - s:, 0] = 1.0
    lower[depth - 1 - s:, 1] = 1.0
    return TheoryGnnParams(theta1=theta1, theta2=theta2, lower=lower, depth=depth)


def theory_params_to_values(params: TheoryGnnParams):
    """Tape leaves for every scalar, in flat() order."""
    vals = [Value(np.asarray(x), requires_grad=True)
            for x in params.flat()]
    return vals


def _propagator(tilde):
    """Propagation closure for either a CSRMatrix or a dense ndarray.

    Small Monte-Carlo batches run much faster through BLAS, so the theory
    oracle passes dense operators; the training path keeps sparse ones.
    """
    if isinstance(tilde, np.ndarray):
        op = Value(tilde)
        return lambda h: tape.matmul(op, h)
    rows, cols, data = tilde.coo
    n = tilde.shape[0]
    vals = Value(data)
    return lambda h: tape.sparse_dense_matmul(vals, rows, cols, n, h)


def theory_gnn_forward(tilde, x1, x2, param_values, depth: int) -> Value:
    """Predictions H1^(L) * theta1 + H2^(L) * theta2 on the tape.

    `param_values` is the list produced by `theory_params_to_values` (or any
    Values in the same order); `x1`/`x2` may be (N,) vectors or (N, S) batches
    of Monte-Carlo draws. `tilde` may be a CSRMatrix or a dense ndarray.
    """
    propagate = _propagator(tilde)
    theta1, theta2 = param_values[0], param_values[1]
    h1 = tape.as_value(np.asarray(x1, dtype=np.float64))
    h2 = tape.as_value(np.asarray(x2, dtype=np.float64))
    for layer in range(depth - 1):
        base = 2 + 4 * layer
        h1 = _theory_layer(propagate, h1, param_values[base], param_values[base + 1])
        h2 = _theory_layer(propagate, h2, param_values[base + 2], param_values[base + 3])
    return add_branches(theta1, h1, theta2, h2)


def theory_branch_outputs(tilde, x1, x2, params: TheoryGnnParams):
    """(H1^(L), H2^(L)) as plain arrays, for diagnostics."""
    vals = theory_params_to_values(params)
    propagate = _propagator(tilde)
    h1 = tape.as_value(np.asarray(x1, dtype=np.float64))
    h2 = tape.as_value(np.asarray(x2, dtype=np.float64))
    for layer in range(params.depth - 1):
        base = 2 + 4 * layer
        h1 = _theory_layer(propagate, h1, vals[base], vals[base + 1])
        h2 = _theory_layer(propagate, h2, vals[base + 2], vals[base + 3])
    return h1.data, h2.data


def _theory_layer(propagate, h, agg_w, self_w):
    # agg*(A_tilde - I) + self*I  ==  agg*A_tilde + (self - agg)*I
    return tape.add(tape.scalar_mul(agg_w, propagate(h)),
                    tape.scalar_mul(tape.sub(self_w, agg_w), h))


def add_branches(theta1, h1, theta2, h2) -> Value:
    return tape.add(tape.scalar_mul(theta1, h1), tape.scalar_mul(theta2, h2))


# ---------------------------------------------------------------------------
# Message-passing models
# ---------------------------------------------------------------------------


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Mpnn:
    """GCN-style or attention GNN.

    kind="gcn": H <- relu(A_hat @ H @ W + b) per layer (linear final body
    layer), where A_hat is the (optionally masked) normalized adjacency with
    self-loops. kind="gat": single-head additive attention over neighbors,
    row-softmax normalized; a soft edge mask enters the scores as log-weights.

    With direct_logits=True (the toy diagnostic model: a single GCN layer
    whose output are the class logits) no separate head exists; the
    representation aligned by the objectives is the logits themselves, and
    `contribution_split` exposes the per-input-half contributions for the
    invariant/spurious diagnostics. Otherwise a linear head maps the final
    body layer to logits.
    """

    def __init__(self, kind: str, feature_dim: int, num_classes: int, hidden: int = 64,
                 layers: int = 3, seed: int = 0, direct_logits: bool = False,
                 label: str = "model"):
        from goodlab.rng import stream
        if kind not in ("gcn", "gat"):
            raise ValueError(f"unknown model kind: {kind}")
        if direct_logits and layers != 1:
            raise ValueError("direct_logits requires a single layer")
        self.kind = kind
        self.num_layers = layers
        self.hidden = num_classes if direct_logits else hidden
        self.num_classes = num_classes
        self.direct_logits = direct_logits
        self.weights = []
        self.biases = []
        self.att = []
        dims = [feature_dim] + [self.hidden] * layers
        for li in range(layers):
            rng = stream(seed, f"{label}/init/layer{li}")
            self.weights.append(Value(_uniform_init(rng, dims[li], (dims[li], dims[li + 1])),
                                      requires_grad=True))
            self.biases.append(Value(np.zeros(dims[li + 1]), requires_grad=True))
            if kind == "gat":
                self.att.append((Value(_uniform_init(rng, dims[li + 1], (dims[li + 1], 1)),
                                       requires_grad=True),
                                 Value(_uniform_init(rng, dims[li + 1], (dims[li + 1], 1)),
                                       requires_grad=True)))
        if direct_logits:
            self.head_w = self.head_b = None
        else:
            rng = stream(seed, f"{label}/init/head")
            self.head_w = Value(_uniform_init(rng, self.hidden, (self.hidden, num_classes)),
                                requires_grad=True)
            self.head_b = Value(np.zeros(num_classes), requires_grad=True)

    def params(self):
        out = []
        for li in range(self.num_layers):
            out.extend([self.weights[li], self.biases[li]])
            if self.kind == "gat":
                out.extend(self.att[li])
        if not self.direct_logits:
            out.extend([self.head_w, self.head_b])
        return out

    def param_names(self):
        names = []
        for li in range(self.num_layers):
            names.extend([f"w{li}", f"b{li}"])
            if self.kind == "gat":
                names.extend([f"att_src{li}", f"att_dst{li}"])
        if not self.direct_logits:
            names.extend(["head_w", "head_b"])
        return names

    def forward(self, gt: GraphTensors, x: np.ndarray, adj_triple=None, edge_mask=None):
        """Returns (representation, logits).

        `adj_triple` = (rows, cols, values) drives gcn aggregation (values may
        be a differentiable Value for the masked adjacency); `edge_mask` are
        per-undirected-edge weights consumed by the attention scores for gat.
        """
        h = tape.as_value(np.asarray(x, dtype=np.float64))
        for li in range(self.num_layers):
            hw = tape.matmul(h, self.weights[li])
            if self.kind == "gcn":
                rows, cols, vals = adj_triple
                agg = tape.sparse_dense_matmul(tape.as_value(vals), rows, cols, gt.n, hw)
            else:
                agg = self._attention(gt, hw, edge_mask, li)
            agg = tape.add_rowvec(agg, self.biases[li])
            h = tape.relu(agg) if li < self.num_layers - 1 else agg
        if self.direct_logits:
            return h, h
        logits = tape.add_rowvec(tape.matmul(h, self.head_w), self.head_b)
        return h, logits

    def contribution_split(self, gt: GraphTensors, x: np.ndarray, adj_values) -> np.ndarray:
        """Diagnostic representation [invariant-contribution;
        spurious-contribution]: the aggregated first/last input halves pushed
        through the corresponding rows of the single body weight (1-layer
        gcn models only)."""
        if self.kind != "gcn" or self.num_layers != 1:
            raise ValueError("contribution_split applies to single-layer gcn models")
        vals = adj_values.data if isinstance(adj_values, Value) else adj_values
        ax = np.zeros((gt.n, x.shape[1]))
        np.add.at(ax, gt.tilde_rows, vals[:, None] * np.asarray(x)[gt.tilde_cols])
        w = self.weights[0].data
        half = x.shape[1] // 2
        return np.concatenate([ax[:, :half] @ w[:half, :], ax[:, half:] @ w[half:, :]], axis=1)

    def _attention(self, gt: GraphTensors, hw: Value, edge_mask, li: int):
        """Additive single-head attention over neighbors (no self term);
        uniform scores reduce exactly to mean aggregation by node degree."""
        if gt.num_edges == 0:
            return tape.scale(hw, 0.0)
        a_src, a_dst = self.att[li]
        score_src = tape.row_sum(tape.matmul(hw, a_src))
        score_dst = tape.row_sum(tape.matmul(hw, a_dst))
        scores = tape.leaky_relu(tape.add(tape.gather_rows(score_src, gt.att_src),
                                          tape.gather_rows(score_dst, gt.att_dst)))
        if edge_mask is not None:
            mask_dir = tape.gather_rows(tape.as_value(edge_mask), gt.att_edge_index)
            scores = tape.add(scores, tape.log(tape.clamp(mask_dir, 1e-6, 1.0 - 1e-6)))
        alpha = tape.segment_softmax(scores, gt.att_indptr)
        return tape.sparse_dense_matmul(alpha, gt.att_src, gt.att_dst, gt.n, hw)


class EdgeMaskExtractor:
    """Soft invariant-subgraph extractor.

    An auxiliary GCN encoder (same architecture as the main encoder,
    independent weights) embeds the nodes on the unmasked graph; each edge
    gets the weight Sigmoid(phi_u . phi_v), or its min-max normalization over
    the present edges. Weights are clamped to [1e-6, 1 - 1e-6] so the
    downstream degree normalization stays well-posed; min-max over a single
    distinct score maps every edge to 1.
    """

    def __init__(self, feature_dim: int, hidden: int, layers: int, seed: int,
                 mode: str = "sigmoid", label: str = "mask"):
        from goodlab.rng import stream
        if mode not in ("sigmoid", "minmax"):
            raise ValueError(f"unknown mask normalization mode: {mode}")
        self.mode = mode
        self.num_layers = layers
        self.weights = []
        dims = [feature_dim] + [hidden] * layers
        for li in range(layers):
            rng = stream(seed, f"{label}/init/layer{li}")
            self.weights.append(Value(_uniform_init(rng, dims[li], (dims[li], dims[li + 1])),
                                      requires_grad=True))

    def params(self):
        return list(self.weights)

    def param_names(self):
        return [f"mask_w{li}" for li in range(self.num_layers)]

    def edge_weights(self, gt: GraphTensors, x: np.ndarray, tilde_vals: np.ndarray) -> Value:
        """Per-undirected-edge soft weights in (0, 1), differentiable in the
        encoder parameters. Symmetric by construction (dot products)."""
        h = tape.as_value(np.asarray(x, dtype=np.float64))
        for li in range(self.num_layers):
            hw = tape.matmul(h, self.weights[li])
            agg = tape.sparse_dense_matmul(Value(tilde_vals), gt.tilde_rows, gt.tilde_cols,
                                           gt.n, hw)
            h = tape.relu(agg) if li < self.num_layers - 1 else agg
        u, v = gt.edges[:, 0], gt.edges[:, 1]
        dots = tape.row_sum(tape.hadamard(tape.gather_rows(h, u), tape.gather_rows(h, v)))
        if self.mode == "sigmoid":
            return tape.clamp(tape.sigmoid(dots), 1e-6, 1.0 - 1e-6)
        lo, hi = float(dots.data.min()), float(dots.data.max())
        if hi - lo < 1e-12:
            return Value(np.ones(gt.num_edges))
        shifted = tape.sub(dots, Value(np.full(gt.num_edges, lo)))
        return tape.clamp(tape.scale(shifted, 1.0 / (hi - lo)), 1e-6, 1.0 - 1e-6)


def save_checkpoint(path: str, named_arrays: dict) -> None:
    """JSON checkpoint: shapes plus row-major hex floats (exact round-trip)."""
    payload = {
        name: {"shape": list(np.asarray(a).shape),
               "data": [float(x).hex() for x in np.asarray(a, dtype=np.float64).reshape(-1)]}
        for name, a in named_arrays.items()
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=None, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return {name: np.array([float.fromhex(x) for x in rec["data"]],
                           dtype=np.float64).reshape(rec["shape"])
            for name, rec in payload.items()}
