"""Evaluation metrics (OOD accuracy, representation diagnostics, margin loss)
and the generalization-bound term calculator for the CSBM family.

The bound terms track how environment shift enters the error: (a) couples
class separability to the aggregated-feature distance between test and train,
(b) measures the spurious-mean shift, and (c) the shift in heterophilic
neighborhood label distributions over matched near-sets. The equal-size
disjoint near-sets of the analysis are approximated by assigning every test
node to its nearest training node in aggregated-feature space (many-to-one
allowed): the calculator tracks trends, it does not certify the constant.
"""

from dataclasses import dataclass

import numpy as np

from goodlab.graphs import Graph


# ---------------------------------------------------------------------------
# Training metrics
# ---------------------------------------------------------------------------


def ood_accuracy(logits: np.ndarray, labels: np.ndarray, rows: np.ndarray) -> float:
    """Argmax match rate over the selected rows; ties break to the lowest
    class index."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("ood_accuracy: empty node selection")
    pred = np.argmax(logits[rows], axis=1)
    return float((pred == labels[rows]).mean())


def invariant_variance(representations: np.ndarray, labels: np.ndarray,
                       half: int = None) -> float:
    """Mean over classes of the trace of the per-class covariance of the
    invariant representation half (first half of the dims by the toy
    convention). Classes with fewer than 2 nodes are skipped."""
    half = representations.shape[1] // 2 if half is None else half
    inv = representations[:, :half]
    out = []
    for c in np.unique(labels):
        rows = inv[labels == c]
        if rows.shape[0] < 2:
            continue
        centered = rows - rows.mean(axis=0)
        out.append(float((centered ** 2).sum() / (rows.shape[0] - 1)))
    return float(np.mean(out)) if out else 0.0


def spurious_norm(representations: np.ndarray, half: int = None) -> float:
    """Mean L2 norm of the spurious representation half (last half of the
    dims by the toy convention)."""
    half = representations.shape[1] // 2 if half is None else half
    return float(np.linalg.norm(representations[:, half:], axis=1).mean())


def margin_loss(logits: np.ndarray, labels: np.ndarray, gamma: float) -> float:
    """Fraction of nodes whose true-class logit fails to clear the best wrong
    class by gamma."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    n, c = logits.shape
    true = logits[np.arange(n), labels]
    masked = logits.copy()
    masked[np.arange(n), labels] = -np.inf
    best_wrong = masked.max(axis=1)
    return float((true <= gamma + best_wrong).mean())


# ---------------------------------------------------------------------------
# Aggregated features, matching, and the bound terms
# ---------------------------------------------------------------------------


def aggregated_features(graph: Graph) -> np.ndarray:
    """One mean-aggregation layer over the closed neighborhood N(i) + {i}.

    Including the node itself keeps the feature defined for isolated nodes.
    """
    n = graph.num_nodes
    out = graph.features.copy()
    count = np.ones(n)
    for u, v in graph.edges:
        out[u] += graph.features[v]
        out[v] += graph.features[u]
        count[u] += 1
        count[v] += 1
    return out / count[:, None]


def epsilon_distance(g_train: np.ndarray, g_test: np.ndarray) -> float:
    """max over test nodes of min over train nodes of the L2 distance."""
    if g_train.shape[0] == 0 or g_test.shape[0] == 0:
        raise ValueError("epsilon_distance: empty node set")
    d2 = _pairwise_sq(g_test, g_train)
    return float(np.sqrt(np.maximum(d2.min(axis=1), 0.0)).max())


def match_test_to_train(g_train: np.ndarray, g_test: np.ndarray) -> np.ndarray:
    """Nearest training node per test node (many-to-one; ties to the lowest
    train index)."""
    d2 = _pairwise_sq(g_test, g_train)
    return np.argmin(d2, axis=1)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a ** 2).sum(axis=1)[:, None] + (b ** 2).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def hetero_ratio_tensor(graph: Graph) -> np.ndarray:
    """R[i, c, c'] = fraction of node i's one-hop neighbors of class c' when
    y_i = c and c' != c; zero elsewhere (and for isolated nodes)."""
    n, c = graph.num_nodes, graph.num_classes
    counts = np.zeros((n, c))
    for u, v in graph.edges:
        counts[u, graph.labels[v]] += 1
        counts[v, graph.labels[u]] += 1
    deg = counts.sum(axis=1)
    ratios = np.divide(counts, deg[:, None], out=np.zeros_like(counts), where=deg[:, None] > 0)
    out = np.zeros((n, c, c))
    out[np.arange(n), graph.labels, :] = ratios
    out[np.arange(n), graph.labels, graph.labels] = 0.0
    return out


def term_c_from_ratios(matching: np.ndarray, ratios_train: np.ndarray,
                       ratios_test: np.ndarray, sigma_sq: float) -> float:
    """(1 / 2 sigma^2) averaged L1 discrepancy of heterophilic ratios over the
    matched near-sets; train nodes with an empty near-set contribute zero."""
    n_train = ratios_train.shape[0]
    totals = np.zeros(n_train)
    counts = np.zeros(n_train)
    l1 = np.abs(ratios_test - ratios_train[matching]).sum(axis=(1, 2))
    np.add.at(totals, matching, l1)
    np.add.at(counts, matching, 1.0)
    per_train = np.divide(totals, counts, out=np.zeros_like(totals), where=counts > 0)
    return float(per_train.sum() / (2.0 * sigma_sq * n_train))


@dataclass(frozen=True)
class BoundReport:
    epsilon: float
    term_a: float
    term_b: float
    term_c: float
    max_feature_norm: float
    sigma_sq: float
    term_d: float = None      # only with a supplied classifier head
    const: float = None
    t_h: float = None         # max spectral norm of the head layers, reported only

    def __post_init__(self):
        for name in ("epsilon", "term_a", "term_b", "term_c", "max_feature_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def as_dict(self) -> dict:
        return {
            "epsilon": self.epsilon, "term_a": self.term_a, "term_b": self.term_b,
            "term_c": self.term_c, "max_feature_norm": self.max_feature_norm,
            "sigma_sq": self.sigma_sq, "term_d": self.term_d, "const": self.const,
            "t_h": self.t_h,
        }


def bound_terms(train_graph: Graph, test_graph: Graph, class_means: np.ndarray,
                train_env_means: np.ndarray, test_env_means: np.ndarray,
                sigma_sq: float, head_weights=None, alpha: float = 0.2,
                gamma: float = 1.0, delta: float = 0.05) -> BoundReport:
    """Bound terms for a CSBM train/test pair with generator-known means.

    term_a = (1/sigma^2) * sum_c sum_{c'!=c} sqrt(||[mu_c - mu_c';
    mu_c_te - mu_c'_te]||) * epsilon; term_b = (2/sigma^2) * sum_c (C-1) * B *
    ||mu_c_te - mu_c_tr||; term_c as in `term_c_from_ratios`. The classifier-
    dependent term and the constant are computed only when head weights are
    supplied (alpha, gamma, delta are analysis parameters, not estimated).
    """
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be > 0")
    g_train = aggregated_features(train_graph)
    g_test = aggregated_features(test_graph)
    eps = epsilon_distance(g_train, g_test)
    b_max = float(max(np.linalg.norm(g_train, axis=1).max(),
                      np.linalg.norm(g_test, axis=1).max()))
    c = class_means.shape[0]
    term_a = 0.0
    for ci in range(c):
        for cj in range(c):
            if ci == cj:
                continue
            stacked = np.concatenate([class_means[ci] - class_means[cj],
                                      test_env_means[ci] - test_env_means[cj]])
            term_a += np.sqrt(np.linalg.norm(stacked)) * eps
    term_a /= sigma_sq
    term_b = 2.0 * (c - 1) * b_max * np.linalg.norm(
        test_env_means - train_env_means, axis=1).sum() / sigma_sq
    matching = match_test_to_train(g_train, g_test)
    term_c = term_c_from_ratios(matching, hetero_ratio_tensor(train_graph),
                                hetero_ratio_tensor(test_graph), sigma_sq)
    term_d = const = t_h = None
    if head_weights is not None:
        depth = len(head_weights)
        width = max(w.shape[0] for w in head_weights)
        n_tr = train_graph.num_nodes
        frob = sum(float((w ** 2).sum()) for w in head_weights)
        term_d = width * frob / ((gamma / 8.0) ** (2.0 / depth) * n_tr ** alpha) \
            * eps ** (2.0 / depth)
        const = n_tr ** (2 * alpha - 1) + n_tr ** (-2 * alpha) * np.log(
            depth * c * (2 * b_max) ** (1.0 / depth) / (gamma ** (1.0 / depth) * delta))
        t_h = max(float(np.linalg.norm(w, 2)) for w in head_weights)
    return BoundReport(epsilon=eps, term_a=float(term_a), term_b=float(term_b),
                       term_c=float(term_c), max_feature_norm=b_max, sigma_sq=sigma_sq,
                       term_d=term_d, const=const, t_h=t_h)
