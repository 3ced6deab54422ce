"""The five training objectives: ERM, IRMv1, VREx, cross-environment
intra-class alignment (CIA), and its environment-label-free localized
reweighting variant (CIA-LRA), plus pair construction and reweighting.

CIA-LRA never reads environment ids: `build_cia_lra_pairs` takes only labels,
neighborhood profiles and hop distances, which enforces the contract at the
signature level.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from goodlab import tape
from goodlab.graphs import Graph, HopDistanceTable, NeighborhoodProfile, TRAIN
from goodlab.tape import Value

log = logging.getLogger("goodlab")

OBJECTIVES = ("erm", "irmv1", "vrex", "cia", "cia_lra")

R_SAME_FLOOR = 0.1  # clamp for the homophilic-ratio discrepancy denominator


@dataclass(frozen=True)
class EnvPartition:
    """Environment id -> train-split node indices (environments >= 0 only)."""

    env_nodes: dict

    @property
    def num_envs(self) -> int:
        return len(self.env_nodes)

    def items(self):
        return sorted(self.env_nodes.items())


def build_env_partition(graph: Graph) -> EnvPartition:
    train = graph.split_indices(TRAIN)
    envs = graph.envs[train]
    out = {int(e): train[envs == e] for e in np.unique(envs) if e >= 0}
    return EnvPartition(env_nodes=out)


@dataclass
class PairSet:
    """Per-class aligned node pairs with weights and hop distances.

    mode "cross_env": pairs from different environments, weights all 1.
    mode "local": same-class pairs within the hop budget, min-max normalized
    reweighting. `by_class` maps class -> (i, j, w, d) arrays.
    """

    mode: str
    by_class: dict = field(default_factory=dict)

    @property
    def num_pairs(self) -> int:
        return sum(v[0].shape[0] for v in self.by_class.values())


@dataclass
class ObjectiveConfig:
    kind: str = "erm"
    lam: float = 0.05
    hops: int = 4
    pair_budget: int = 256
    warmup: int = 1
    use_r_diff: bool = True
    use_inv_r_same: bool = True
    use_inv_d: bool = True
    use_mask: bool = True
    r_same_in_numerator: bool = False

    def __post_init__(self):
        if self.kind == "irm":
            self.kind = "irmv1"
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown objective kind: {self.kind}")
        if self.lam < 0:
            raise ValueError("penalty weight must be >= 0")
        if self.hops < 1:
            raise ValueError("hops must be >= 1")


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def erm_loss(predictions: Value, targets: np.ndarray, rows: np.ndarray,
             task: str = "classification") -> Value:
    """Mean cross-entropy (classification, `targets` one-hot) or mean squared
    error (regression) over the selected rows."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("erm_loss: empty node selection")
    if task == "classification":
        return tape.cross_entropy_with_logits(predictions, targets, rows)
    return tape.mse(predictions, targets, rows)


def vrex_penalty(per_env_losses) -> Value:
    """Population variance of the per-environment mean losses."""
    if len(per_env_losses) < 2:
        raise ValueError("vrex_penalty needs at least 2 environments")
    return tape.population_variance(tape.stack_scalars(per_env_losses))


def irmv1_penalty(predictions: Value, targets: np.ndarray, partition: EnvPartition,
                  task: str = "classification") -> Value:
    """Sum over environments of the squared dummy-classifier gradient.

    The derivative at w=1 of the per-environment loss with predictions scaled
    by w is materialized analytically as a differentiable function of the
    predictions: cross-entropy gives g_e = mean_i (softmax(z_i) - y_i) . z_i,
    squared error gives g_e = mean_i 2 z_i (z_i - y_i); first-order backward
    through g_e suffices.
    """
    if partition.num_envs < 1:
        raise ValueError("irmv1_penalty needs at least 1 environment")
    total = None
    for _, rows in partition.items():
        z = tape.gather_rows(predictions, rows)
        if task == "classification":
            y = targets[rows]
            p = tape.row_softmax(z)
            g_e = tape.tmean(tape.row_sum(tape.hadamard(tape.sub(p, Value(y)), z)))
        else:
            y = targets[rows]
            g_e = tape.scale(tape.tmean(tape.hadamard(z, tape.sub(z, Value(y)))), 2.0)
        sq = tape.hadamard(g_e, g_e)
        total = sq if total is None else tape.add(total, sq)
    return total


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------


def build_cia_pairs(graph: Graph, partition: EnvPartition, budget: int, rng) -> PairSet:
    """Uniform subsample of up to `budget` same-class cross-environment pairs
    per class per unordered environment pair; weights all 1."""
    out = PairSet(mode="cross_env")
    envs = partition.items()
    if len(envs) < 2:
        log.warning("CIA pair construction: fewer than 2 environments, empty pair set")
        return out
    for c in range(graph.num_classes):
        iacc, jacc = [], []
        for a in range(len(envs)):
            for b in range(a + 1, len(envs)):
                na = envs[a][1][graph.labels[envs[a][1]] == c]
                nb = envs[b][1][graph.labels[envs[b][1]] == c]
                total = na.shape[0] * nb.shape[0]
                if total == 0:
                    log.info("CIA: class %d missing from env pair (%d, %d)",
                             c, envs[a][0], envs[b][0])
                    continue
                take = min(budget, total)
                flat = rng.choice(total, size=take, replace=False)
                iacc.append(na[flat // nb.shape[0]])
                jacc.append(nb[flat % nb.shape[0]])
        if iacc:
            i = np.concatenate(iacc)
            j = np.concatenate(jacc)
            out.by_class[c] = (i, j, np.ones(i.shape[0]), np.zeros(i.shape[0], dtype=np.int64))
    return out


def lra_raw_weights(r_diff, r_same, dist, config: ObjectiveConfig):
    """Raw pair weights before min-max normalization, honoring the ablation
    switches (a removed factor is replaced by 1)."""
    numerator = r_diff if config.use_r_diff else np.ones_like(r_diff)
    denominator = np.ones_like(r_diff)
    if config.r_same_in_numerator:
        numerator = numerator * r_same
    elif config.use_inv_r_same:
        denominator = denominator * np.maximum(r_same, R_SAME_FLOOR)
    if config.use_inv_d:
        denominator = denominator * dist
    return numerator / denominator


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a degenerate set (single distinct value) maps to 1."""
    if raw.size == 0:
        return raw
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-15:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def build_cia_lra_pairs(labels: np.ndarray, eligible: np.ndarray,
                        profile: NeighborhoodProfile, hops: HopDistanceTable,
                        config: ObjectiveConfig, rng) -> PairSet:
    """Same-class pairs within the hop budget, reweighted by neighborhood
    label distribution discrepancies. No environment ids are consulted.

    `eligible` marks nodes whose labels may be used (the train split during
    training). Raw weight: r_diff / (d * max(r_same, 1e-3)), with factors
    removed or moved per the ablation switches; per-class min-max
    normalization over the sampled set.
    """
    out = PairSet(mode="local")
    i, j, d = hops.rows, hops.cols, hops.dists
    ok = eligible[i] & eligible[j] & (labels[i] == labels[j]) & (d <= config.hops)
    i, j, d = i[ok], j[ok], d[ok]
    cls = labels[i]
    num_classes = profile.ratios.shape[1]
    for c in range(num_classes):
        sel = np.flatnonzero(cls == c)
        if sel.size == 0:
            log.info("CIA-LRA: no pairs within %d hops for class %d", config.hops, c)
            continue
        if sel.size > config.pair_budget:
            sel = sel[rng.choice(sel.size, size=config.pair_budget, replace=False)]
        ci, cj, cd = i[sel], j[sel], d[sel]
        diff = np.abs(profile.ratios[ci] - profile.ratios[cj])
        r_same = diff[:, c]
        r_diff = diff.sum(axis=1) - r_same
        raw = lra_raw_weights(r_diff, r_same, cd.astype(np.float64), config)
        out.by_class[c] = (ci, cj, minmax_normalize(raw), cd)
    return out


# ---------------------------------------------------------------------------
# Alignment and the combined objective
# ---------------------------------------------------------------------------


def alignment_loss(representations: Value, pairs: PairSet) -> Value:
    """Mean over classes of the weighted mean over pairs of the squared L2
    distance between endpoint representations. Empty pair sets contribute 0."""
    if not pairs.by_class:
        log.warning("alignment_loss: empty pair set, contributing 0")
        return Value(np.asarray(0.0))
    per_class = []
    for c in sorted(pairs.by_class):
        i, j, w, _ = pairs.by_class[c]
        diff = tape.sub(tape.gather_rows(representations, i),
                        tape.gather_rows(representations, j))
        sq = tape.hadamard(diff, diff) if diff.data.ndim == 1 else tape.row_sqnorm(diff)
        per_class.append(tape.scale(tape.tsum(tape.hadamard(sq, Value(w))), 1.0 / i.shape[0]))
    total = per_class[0]
    for term in per_class[1:]:
        total = tape.add(total, term)
    return tape.scale(total, 1.0 / len(per_class))


def total_loss(config: ObjectiveConfig, erm_term: Value, penalty_term, epoch: int) -> Value:
    """ERM term plus lam * penalty; the penalty is gated off during warmup."""
    if config.kind == "erm" or penalty_term is None or config.lam == 0.0 \
            or epoch < config.warmup:
        return erm_term
    return tape.add(erm_term, tape.scale(penalty_term, config.lam))
