"""Deterministic generators for the synthetic graph distributions: the
regression SCM (concept and covariate shift), the CSBM with environment-
shifted spurious feature halves, and the 4-class toy dataset.

All generators are pure functions of (config, seed): identical inputs produce
byte-identical dataset directories. Every stochastic site draws from a named
stream, so adding a site never perturbs existing draws.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from goodlab import graphs
from goodlab.graphs import Graph, TRAIN, VAL, TEST
from goodlab.rng import stream

TARGETS = "targets.tsv"
CSBM_META = "csbm_meta.json"


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def erdos_renyi_edges(num_nodes: int, p: float, rng) -> np.ndarray:
    """All-pairs i.i.d. Bernoulli(p) edges, u < v."""
    iu, ju = np.triu_indices(num_nodes, k=1)
    keep = rng.random(iu.shape[0]) < p
    return np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)


def _cross_env_edges(env_slices, num_within: int, fraction: float, rng) -> np.ndarray:
    """Uniform random cross-environment edges, about fraction * num_within."""
    want = int(round(fraction * num_within))
    if want <= 0 or len(env_slices) < 2:
        return np.empty((0, 2), dtype=np.int64)
    starts = np.array([s.start for s in env_slices])
    sizes = np.array([s.stop - s.start for s in env_slices])
    out = set()
    guard = 0
    while len(out) < want and guard < 50 * want:
        guard += 1
        ea, eb = rng.choice(len(env_slices), size=2, replace=False)
        a = starts[ea] + int(rng.integers(sizes[ea]))
        b = starts[eb] + int(rng.integers(sizes[eb]))
        out.add((min(a, b), max(a, b)))
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)


def _random_splits(n: int, rng, fractions=(0.8, 0.1, 0.1)) -> np.ndarray:
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split = np.empty(n, dtype=np.int64)
    split[order[:n_train]] = TRAIN
    split[order[n_train:n_train + n_val]] = VAL
    split[order[n_train + n_val:]] = TEST
    return split


def _merge_edge_sets(parts) -> np.ndarray:
    parts = [p for p in parts if p.size]
    if not parts:
        return np.empty((0, 2), dtype=np.int64)
    e = np.concatenate(parts, axis=0)
    key = e[:, 0] * (e.max() + 1) + e[:, 1]
    _, idx = np.unique(key, return_index=True)
    e = e[np.sort(idx)]
    order = np.lexsort((e[:, 1], e[:, 0]))
    return e[order]


def orthonormal_rows(num_rows: int, dim: int, rng) -> np.ndarray:
    """Seeded QR of a random Gaussian matrix; rows are orthonormal."""
    if num_rows > dim:
        raise ValueError(f"cannot fit {num_rows} orthonormal vectors in dimension {dim}")
    q, r = np.linalg.qr(rng.standard_normal((dim, num_rows)))
    return (q * np.sign(np.diag(r))).T


def check_orthonormal(mat: np.ndarray, what: str, tol: float = 1e-8) -> None:
    gram = mat @ mat.T
    off = gram - np.eye(mat.shape[0])
    if np.abs(off).max() > tol:
        iu = np.triu_indices(mat.shape[0], k=1)
        worst = np.abs(gram[iu]).max() if iu[0].size else np.abs(off).max()
        raise ValueError(f"{what} are not orthonormal (max pairwise |dot| = {worst:.6g})")


# ---------------------------------------------------------------------------
# SCM graphs (regression targets)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScmConfig:
    """Configuration of the structural-causal-model graph family.

    The environment spurious means carry the cross-environment variation; if
    omitted they are drawn N(0, cross_env_spurious_variance) and centered.
    Within one environment the spurious variable scatters around its mean
    with std `within_env_std`.
    """

    num_envs: int = 4
    nodes_per_env: int = 60
    causal_depth: int = 1
    spurious_depth: int = 1
    shift_kind: str = "concept"
    env_spurious_means: tuple = None
    cross_env_spurious_variance: float = 1.0
    within_env_std: float = 0.5
    edge_probability: float = 0.08
    label_noise_std: float = 1.0
    feature_noise_std: float = 1.0
    cross_env_edge_fraction: float = 0.05
    seed: int = 0

    def validate(self):
        if self.nodes_per_env < 2:
            raise ValueError("nodes_per_env must be >= 2")
        if self.causal_depth < 1:
            raise ValueError("causal_depth must be >= 1")
        if self.shift_kind not in ("concept", "covariate"):
            raise ValueError(f"unknown shift_kind: {self.shift_kind}")
        if self.shift_kind == "concept" and self.spurious_depth < 1:
            raise ValueError("spurious_depth must be >= 1 for concept shift")
        if self.cross_env_spurious_variance <= 0:
            raise ValueError("cross_env_spurious_variance must be > 0")
        if not 0 < self.edge_probability < 1:
            raise ValueError("edge_probability must be in (0, 1)")
        if self.env_spurious_means is not None:
            mu = np.asarray(self.env_spurious_means, dtype=np.float64)
            if mu.shape[0] != self.num_envs:
                raise ValueError("need one spurious mean per environment")
            if abs(mu.mean()) > 1e-6 * max(1.0, np.abs(mu).max()):
                raise ValueError("environment spurious means must average to 0")


@dataclass(frozen=True)
class ScmDataset:
    graph: Graph
    targets: np.ndarray  # continuous regression target per node


def resolved_env_means(config: ScmConfig) -> np.ndarray:
    if config.env_spurious_means is not None:
        return np.asarray(config.env_spurious_means, dtype=np.float64)
    rng = stream(config.seed, "scm/env_means")
    mu = rng.normal(0.0, np.sqrt(config.cross_env_spurious_variance), size=config.num_envs)
    return mu - mu.mean()


def synth_scm_env(tilde, x1, k: int, m: int, shift_kind: str, n1, n2, eps):
    """One environment of the SCM given its normalized adjacency and draws.

    concept:    Y = A~^k x1 + n1,  X2 = A~^m Y + n2 + eps
    covariate:  Y = A~^k x1 + n1,  X2 = n2 + eps
    """
    y = np.asarray(x1, dtype=np.float64)
    for _ in range(k):
        y = tilde.matmat(y)
    y = y + n1
    if shift_kind == "concept":
        x2 = np.asarray(y, dtype=np.float64)
        for _ in range(m):
            x2 = tilde.matmat(x2)
        x2 = x2 + n2 + eps
    else:
        x2 = n2 + eps
    return y, x2


def gen_scm(config: ScmConfig) -> ScmDataset:
    config.validate()
    mu_envs = resolved_env_means(config)
    n_env = config.nodes_per_env
    env_edge_sets, feats, targets, env_ids = [], [], [], []
    env_slices = []
    for e in range(config.num_envs):
        g_rng = stream(config.seed, f"scm/env{e}/graph")
        edges = erdos_renyi_edges(n_env, config.edge_probability, g_rng)
        sub = Graph(num_nodes=n_env, num_classes=1, edges=edges,
                    features=np.zeros((n_env, 1)), labels=np.zeros(n_env, dtype=np.int64),
                    envs=np.full(n_env, e), split=np.zeros(n_env, dtype=np.int64))
        tilde = graphs.build_normalized(sub).tilde_a
        d_rng = stream(config.seed, f"scm/env{e}/draws")
        x1 = d_rng.standard_normal(n_env)
        n1 = config.label_noise_std * d_rng.standard_normal(n_env)
        n2 = config.feature_noise_std * d_rng.standard_normal(n_env)
        eps = mu_envs[e] + config.within_env_std * d_rng.standard_normal(n_env)
        y, x2 = synth_scm_env(tilde, x1, config.causal_depth, config.spurious_depth,
                              config.shift_kind, n1, n2, eps)
        offset = e * n_env
        env_edge_sets.append(edges + offset)
        env_slices.append(slice(offset, offset + n_env))
        feats.append(np.stack([x1, x2], axis=1))
        targets.append(y)
        env_ids.append(np.full(n_env, e, dtype=np.int64))
    num_within = sum(s.shape[0] for s in env_edge_sets)
    cross = _cross_env_edges(env_slices, num_within, config.cross_env_edge_fraction,
                             stream(config.seed, "scm/cross_edges"))
    edges = _merge_edge_sets(env_edge_sets + [cross])
    n = config.num_envs * n_env
    targets = np.concatenate(targets)
    labels = _quantile_bins(targets, 4)
    split = _random_splits(n, stream(config.seed, "scm/splits"))
    graph = Graph(num_nodes=n, num_classes=4, edges=edges,
                  features=np.concatenate(feats, axis=0), labels=labels,
                  envs=np.concatenate(env_ids), split=split)
    return ScmDataset(graph=graph, targets=targets)


def _quantile_bins(y: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(y, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, y, side="right").astype(np.int64)


# ---------------------------------------------------------------------------
# CSBM with invariant and environment-shifted spurious feature halves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsbmConfig:
    num_classes: int = 3
    feature_dim: int = 8
    noise_variance: float = 0.25
    p_hm: float = 0.7
    p_ht: tuple = None                 # (C, C) row-stochastic off-diagonal table
    nodes_per_class: int = 60
    mean_degree: float = 10.0
    num_envs: int = 1
    class_means: tuple = None          # (C, D/2); seeded QR when omitted
    env_means: tuple = None            # (num_envs, C, D/2); seeded QR when omitted
    seed: int = 0

    def validate(self):
        if self.feature_dim % 2:
            raise ValueError("feature_dim must be even")
        if self.num_classes > self.feature_dim // 2:
            raise ValueError("need feature_dim/2 >= num_classes for orthonormal means")
        if self.noise_variance <= 0:
            raise ValueError("noise_variance must be > 0")
        if not 0 <= self.p_hm <= 1:
            raise ValueError("p_hm must lie in [0, 1]")
        table = self.resolved_p_ht()
        row_tot = self.p_hm + table.sum(axis=1) - np.diag(table)
        if np.abs(row_tot - 1.0).max() > 1e-9:
            raise ValueError("p_hm + sum of heterophilic ratios must equal 1 per class")
        if np.abs(np.diag(table)).max() > 0:
            raise ValueError("p_ht table must have a zero diagonal")

    def resolved_p_ht(self) -> np.ndarray:
        c = self.num_classes
        if self.p_ht is None:
            t = np.full((c, c), (1.0 - self.p_hm) / max(c - 1, 1))
            np.fill_diagonal(t, 0.0)
            return t
        return np.asarray(self.p_ht, dtype=np.float64).reshape(c, c)


@dataclass(frozen=True)
class CsbmDataset:
    graph: Graph
    class_means: np.ndarray            # (C, D/2)
    env_means: np.ndarray              # (num_envs, C, D/2)
    noise_variance: float
    p_hm: float
    p_ht: np.ndarray


def resolved_csbm_means(config: CsbmConfig):
    half = config.feature_dim // 2
    if config.class_means is not None:
        cm = np.asarray(config.class_means, dtype=np.float64).reshape(config.num_classes, half)
    else:
        cm = orthonormal_rows(config.num_classes, half, stream(config.seed, "csbm/class_means"))
    check_orthonormal(cm, "class means")
    if config.env_means is not None:
        em = np.asarray(config.env_means, dtype=np.float64).reshape(
            config.num_envs, config.num_classes, half)
    else:
        em = np.stack([orthonormal_rows(config.num_classes, half,
                                        stream(config.seed, f"csbm/env_means{e}"))
                       for e in range(config.num_envs)])
    for e in range(config.num_envs):
        check_orthonormal(em[e], f"environment {e} means")
    return cm, em


def gen_csbm(config: CsbmConfig) -> CsbmDataset:
    """Class-uniform CSBM: node features are [invariant; spurious] Gaussian
    halves; per-node neighbor counts are Poisson(mean_degree) and neighbor
    classes follow (p_hm, p_ht) in expectation.

    Neighbor classes are sampled by inverse-CDF against per-stub uniforms that
    depend only on the seed, so datasets generated with the same seed but
    shifted ratio tables are monotonically coupled.
    """
    config.validate()
    cm, em = resolved_csbm_means(config)
    half = config.feature_dim // 2
    c = config.num_classes
    p_ht = config.resolved_p_ht()
    probs = p_ht.copy()
    probs[np.arange(c), np.arange(c)] = config.p_hm
    cum = np.cumsum(probs, axis=1)
    sigma = float(np.sqrt(config.noise_variance))
    n_env = config.nodes_per_class * c
    feats, labels, env_ids, env_edge_sets, env_slices = [], [], [], [], []
    for e in range(config.num_envs):
        offset = e * n_env
        lab = np.repeat(np.arange(c), config.nodes_per_class)
        f_rng = stream(config.seed, f"csbm/env{e}/features")
        inv = cm[lab] + sigma * f_rng.standard_normal((n_env, half))
        sp = em[e][lab] + sigma * f_rng.standard_normal((n_env, half))
        members = [np.flatnonzero(lab == cls) for cls in range(c)]
        deg_rng = stream(config.seed, f"csbm/env{e}/degrees")
        counts = deg_rng.poisson(config.mean_degree, size=n_env)
        stub_rng = stream(config.seed, f"csbm/env{e}/stubs")
        edge_set = set()
        for i in range(n_env):
            if counts[i] == 0:
                continue
            u_class = stub_rng.random(counts[i])
            u_node = stub_rng.random(counts[i])
            cls_row = cum[lab[i]]
            for uc, un in zip(u_class, u_node):
                cls = int(np.searchsorted(cls_row, uc, side="right"))
                cls = min(cls, c - 1)
                pool = members[cls]
                if cls == lab[i]:
                    j = int(un * (pool.shape[0] - 1))
                    j = pool[j] if pool[j] != i else pool[-1]
                else:
                    j = pool[int(un * pool.shape[0])]
                if j != i:
                    edge_set.add((min(i, j) + offset, max(i, j) + offset))
        env_edge_sets.append(np.array(sorted(edge_set), dtype=np.int64).reshape(-1, 2))
        env_slices.append(slice(offset, offset + n_env))
        feats.append(np.concatenate([inv, sp], axis=1))
        labels.append(lab)
        env_ids.append(np.full(n_env, e, dtype=np.int64))
    edges = _merge_edge_sets(env_edge_sets)
    n = config.num_envs * n_env
    split = _random_splits(n, stream(config.seed, "csbm/splits"))
    graph = Graph(num_nodes=n, num_classes=c, edges=edges,
                  features=np.concatenate(feats, axis=0),
                  labels=np.concatenate(labels), envs=np.concatenate(env_ids), split=split)
    return CsbmDataset(graph=graph, class_means=cm, env_means=em,
                       noise_variance=config.noise_variance, p_hm=config.p_hm, p_ht=p_ht)


# ---------------------------------------------------------------------------
# 4-class toy dataset (two training environments plus one test environment)
# ---------------------------------------------------------------------------

TOY_INV_MEANS = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
TOY_SP_PATTERNS = np.array([[3, 3], [-3, 3], [-3, -3], [3, -3]], dtype=np.float64)
TOY_COV_ENV_MEANS = np.array([[2, 2], [4, 4], [6, 6]], dtype=np.float64)


@dataclass(frozen=True)
class ToyConfig:
    """4 classes, 4-dim features; the first two dimensions are invariant, the
    last two spurious. Concept shift rotates the class-to-spurious-pattern
    assignment by one position per environment; covariate shift gives every
    class the same per-environment spurious mean.

    Topology: within each environment, edges are class-homophilous (expected
    same-class neighbor fraction `homophily`, mean within-degree set by
    `edge_probability`), which gives the neighborhood-label-distribution
    statistics something to measure; environments are joined by uniform
    random cross-environment edges (`cross_env_edge_fraction` of the
    within-environment edge count).
    """

    nodes_per_class_per_env: int = 100
    shift_kind: str = "concept"
    edge_probability: float = 0.0075
    homophily: float = 0.35
    spatial_correlation: float = 0.5
    cross_env_edge_fraction: float = 0.3
    seed: int = 0

    def validate(self):
        if self.shift_kind not in ("concept", "covariate"):
            raise ValueError(f"unknown shift_kind: {self.shift_kind}")
        if self.nodes_per_class_per_env < 2:
            raise ValueError("nodes_per_class_per_env must be >= 2")
        if not 0 < self.edge_probability < 1:
            raise ValueError("edge_probability must be in (0, 1)")
        if not 0 <= self.homophily <= 1:
            raise ValueError("homophily must lie in [0, 1]")
        if not 0 <= self.spatial_correlation < 1:
            raise ValueError("spatial_correlation must lie in [0, 1)")


def toy_spurious_mean(shift_kind: str, env: int, cls: int) -> np.ndarray:
    if shift_kind == "concept":
        return TOY_SP_PATTERNS[(cls + env) % 4]
    return TOY_COV_ENV_MEANS[env]


def homophilous_edges(labels: np.ndarray, p_mean: float, homophily: float, rng) -> np.ndarray:
    """Class-sensitive Bernoulli edges with overall density p_mean and the
    given expected same-class neighbor fraction (0.25 recovers uniform ER
    for four balanced classes)."""
    c = int(labels.max()) + 1
    p_same = c * homophily * p_mean
    p_diff = c * (1.0 - homophily) * p_mean / max(c - 1, 1)
    if max(p_same, p_diff) >= 1:
        raise ValueError("homophily/edge_probability combination exceeds probability 1")
    iu, ju = np.triu_indices(labels.shape[0], k=1)
    prob = np.where(labels[iu] == labels[ju], p_same, p_diff)
    keep = rng.random(iu.shape[0]) < prob
    return np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)


def _smooth_unit_field(edges: np.ndarray, num_nodes: int, dims: int, rng) -> np.ndarray:
    """Graph-smoothed Gaussian field rescaled to unit per-node variance.

    Two propagation steps of white noise over the normalized adjacency give a
    field that varies slowly along edges; standardizing keeps the per-node
    marginal standard normal.
    """
    from goodlab import graphs as _g
    base = Graph(num_nodes=num_nodes, num_classes=1, edges=edges,
                 features=np.zeros((num_nodes, 1)), labels=np.zeros(num_nodes, dtype=np.int64),
                 envs=np.zeros(num_nodes, dtype=np.int64), split=np.zeros(num_nodes, dtype=np.int64))
    tilde = _g.build_normalized(base).tilde_a
    field = rng.standard_normal((num_nodes, dims))
    for _ in range(2):
        field = tilde.matmat(field)
    std = field.std(axis=0)
    std[std == 0] = 1.0
    return (field - field.mean(axis=0)) / std


def gen_toy(config: ToyConfig) -> Graph:
    config.validate()
    npc = config.nodes_per_class_per_env
    n_env = 4 * npc
    rho = config.spatial_correlation
    feats, labels, env_ids, env_edge_sets, env_slices, splits = [], [], [], [], [], []
    for e in range(3):
        offset = e * n_env
        lab = np.repeat(np.arange(4), npc)
        f_rng = stream(config.seed, f"toy/env{e}/features")
        g_rng = stream(config.seed, f"toy/env{e}/graph")
        env_edges = homophilous_edges(lab, config.edge_probability, config.homophily, g_rng)
        # invariant features vary smoothly along the graph (unit marginals
        # preserved): nearby same-class nodes are more similar than distant ones
        field = _smooth_unit_field(env_edges, n_env, 2, f_rng)
        noise = np.sqrt(1.0 - rho ** 2) * f_rng.standard_normal((n_env, 2)) + rho * field
        inv = TOY_INV_MEANS[lab] + noise
        sp_mu = np.stack([toy_spurious_mean(config.shift_kind, e, int(c)) for c in lab])
        sp = sp_mu + f_rng.standard_normal((n_env, 2))
        env_edge_sets.append(env_edges + offset)
        env_slices.append(slice(offset, offset + n_env))
        feats.append(np.concatenate([inv, sp], axis=1))
        labels.append(lab)
        env_ids.append(np.full(n_env, e, dtype=np.int64))
        if e < 2:
            splits.append(np.full(n_env, TRAIN, dtype=np.int64))
        else:
            half_rng = stream(config.seed, "toy/val_test_split")
            order = half_rng.permutation(n_env)
            sp_split = np.full(n_env, TEST, dtype=np.int64)
            sp_split[order[: n_env // 2]] = VAL
            splits.append(sp_split)
    num_within = sum(s.shape[0] for s in env_edge_sets)
    cross = _cross_env_edges(env_slices, num_within, config.cross_env_edge_fraction,
                             stream(config.seed, "toy/cross_edges"))
    edges = _merge_edge_sets(env_edge_sets + [cross])
    return Graph(num_nodes=3 * n_env, num_classes=4, edges=edges,
                 features=np.concatenate(feats, axis=0), labels=np.concatenate(labels),
                 envs=np.concatenate(env_ids), split=np.concatenate(splits))


# ---------------------------------------------------------------------------
# Dataset directory I/O for generator outputs
# ---------------------------------------------------------------------------


def save_scm_dataset(ds: ScmDataset, out_dir: str) -> None:
    graphs.save_dataset(ds.graph, out_dir)
    with open(os.path.join(out_dir, TARGETS), "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(repr(float(t)) + "\n" for t in ds.targets)


def load_targets(data_dir: str):
    path = os.path.join(data_dir, TARGETS)
    if not os.path.exists(path):
        return None
    return np.loadtxt(path, dtype=np.float64, ndmin=1)


def save_csbm_dataset(ds: CsbmDataset, out_dir: str) -> None:
    graphs.save_dataset(ds.graph, out_dir)
    meta = {
        "class_means": ds.class_means.tolist(),
        "env_means": ds.env_means.tolist(),
        "noise_variance": ds.noise_variance,
        "p_hm": ds.p_hm,
        "p_ht": ds.p_ht.tolist(),
    }
    with open(os.path.join(out_dir, CSBM_META), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def load_csbm_meta(data_dir: str) -> dict:
    with open(os.path.join(data_dir, CSBM_META), encoding="utf-8") as fh:
        meta = json.load(fh)
    meta["class_means"] = np.asarray(meta["class_means"], dtype=np.float64)
    meta["env_means"] = np.asarray(meta["env_means"], dtype=np.float64)
    meta["p_ht"] = np.asarray(meta["p_ht"], dtype=np.float64)
    return meta


# ---------------------------------------------------------------------------
# Flat key-value config files
# ---------------------------------------------------------------------------


def parse_kv_file(path: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment; values stay strings."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def coerce_fields(raw: dict, field_types: dict, what: str) -> dict:
    """Coerce raw string values per field_types; unknown keys are an error
    listing the offending names."""
    unknown = sorted(set(raw) - set(field_types))
    if unknown:
        raise ValueError(f"invalid {what} config keys: {', '.join(unknown)}")
    out = {}
    for key, val in raw.items():
        kind = field_types[key]
        if kind is bool:
            out[key] = val.lower() in ("1", "true", "yes", "on")
        elif kind is tuple:
            out[key] = tuple(float(x) for x in val.split(",") if x.strip())
        else:
            out[key] = kind(val)
    return out
