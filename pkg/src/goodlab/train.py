"""Training loop wiring generation artifacts, models, objectives and metrics,
with per-epoch JSON-line records and a deterministic summary.

Epoch numbering: record 0 captures the freshly initialized model (no update),
records 1..epochs follow one optimizer step each. The penalty is gated off
for the first `warmup` training epochs. Model selection: best OOD-validation
accuracy, ties to the earliest epoch.
"""

import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from goodlab import graphs, metrics, objectives, tape
from goodlab.generators import load_targets
from goodlab.graphs import Graph, TRAIN, VAL, TEST
from goodlab.models import (EdgeMaskExtractor, GraphTensors, Mpnn, TheoryGnnParams,
                            masked_tilde_values, row_norm_from_weights, save_checkpoint,
                            theory_gnn_forward, theory_params_to_values,
                            unmasked_tilde_values)
from goodlab.objectives import ObjectiveConfig, build_env_partition
from goodlab.rng import stream
from goodlab.tape import Value

MODELS = ("theory_linear", "gcn", "gat")


@dataclass
class RunConfig:
    dataset_dir: str
    model: str = "gcn"
    objective: str = "erm"
    lam: float = 0.05
    hops: int = 4
    epochs: int = 200
    lr: float = 0.01
    mask_lr: float = 1e-3
    pair_budget: int = 256
    subgraph: int = 0           # 0 = whole graph
    seed: int = 0
    layers: int = 0             # 0 = dataset-dependent default
    hidden: int = 0
    warmup: int = 1
    mask_mode: str = "sigmoid"
    use_r_diff: bool = True
    use_inv_r_same: bool = True
    use_inv_d: bool = True
    use_mask: bool = True
    r_same_in_numerator: bool = False

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model: {self.model}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(
            kind=self.objective, lam=self.lam, hops=self.hops,
            pair_budget=self.pair_budget, warmup=self.warmup,
            use_r_diff=self.use_r_diff, use_inv_r_same=self.use_inv_r_same,
            use_inv_d=self.use_inv_d, use_mask=self.use_mask,
            r_same_in_numerator=self.r_same_in_numerator)


@dataclass
class TrainingRecord:
    epoch: int
    erm_loss: float
    penalty: float
    total_loss: float
    train_accuracy: float
    val_accuracy: float
    test_accuracy: float
    invariant_variance: float = None
    spurious_norm: float = None
    wall_ms: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _model_defaults(graph: Graph, config: RunConfig):
    """Toy-style datasets (4-dim features, 4 classes) get the single-layer
    diagnostic GCN whose outputs are the logits; everything else gets the
    3-layer width-64 default."""
    toy_like = graph.feature_dim == 4 and graph.num_classes == 4
    layers = config.layers or (1 if toy_like else 3)
    hidden = config.hidden or (4 if toy_like else 64)
    diagnostics = (config.model == "gcn" and layers == 1 and toy_like
                   and graph.feature_dim % 2 == 0)
    return layers, hidden, diagnostics


class _SubgraphView:
    """Induced subgraph over sampled nodes, with index maps back to the
    parent graph. With size 0 (or >= N) this is the identity view."""

    def __init__(self, graph: Graph, targets, nodes: np.ndarray):
        self.nodes = nodes
        keep = np.zeros(graph.num_nodes, dtype=bool)
        keep[nodes] = True
        remap = np.full(graph.num_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(nodes.shape[0])
        e = graph.edges
        sel = keep[e[:, 0]] & keep[e[:, 1]] if e.size else np.zeros(0, dtype=bool)
        sub_edges = np.sort(remap[e[sel]], axis=1) if e.size else e
        self.graph = Graph(num_nodes=nodes.shape[0], num_classes=graph.num_classes,
                           edges=sub_edges, features=graph.features[nodes],
                           labels=graph.labels[nodes], envs=graph.envs[nodes],
                           split=graph.split[nodes])
        self.targets = None if targets is None else targets[nodes]


class Trainer:
    def __init__(self, config: RunConfig):
        self.config = config
        self.graph = graphs.load_dataset(config.dataset_dir)
        self.targets = load_targets(config.dataset_dir)
        self.task = "regression" if config.model == "theory_linear" else "classification"
        if self.task == "regression" and self.targets is None:
            raise ValueError("theory_linear requires a dataset with targets.tsv")
        self.ocfg = config.objective_config()
        self.layers, self.hidden, self.direct = _model_defaults(self.graph, config)
        if config.model == "theory_linear":
            init = stream(config.seed, "model/theory_init")
            depth = max(self.layers, 2)
            params = TheoryGnnParams.from_flat(
                init.uniform(-1.0, 1.0, size=2 + 4 * (depth - 1)), depth)
            self.theory_depth = depth
            self.params = theory_params_to_values(params)
            self.model = None
        else:
            self.model = Mpnn(config.model, self.graph.feature_dim, self.graph.num_classes,
                              hidden=self.hidden, layers=self.layers, seed=config.seed)
            self.params = self.model.params()
        self.mask_enabled = (self.ocfg.kind == "cia_lra" and self.ocfg.use_mask
                             and self.ocfg.lam > 0 and config.model != "theory_linear")
        self.mask = EdgeMaskExtractor(self.graph.feature_dim, self.hidden, self.layers,
                                      config.seed, mode=config.mask_mode) \
            if self.mask_enabled else None
        self.adam = tape.AdamState(self.params, lr=config.lr)
        self.mask_adam = tape.AdamState(self.mask.params(), lr=config.mask_lr) \
            if self.mask_enabled else None
        self.full_gt = GraphTensors(self.graph.num_nodes, self.graph.edges)
        self.full_tilde = unmasked_tilde_values(self.full_gt)
        self._hop_cache = (None, None)

    # -- forward helpers ----------------------------------------------------

    def _mask_values(self, gt: GraphTensors, x: np.ndarray, tilde_const: np.ndarray):
        if not self.mask_enabled:
            return None
        return self.mask.edge_weights(gt, x, tilde_const)

    def _adj_values(self, gt: GraphTensors, tilde_const, mask_w):
        if mask_w is not None:
            return masked_tilde_values(gt, mask_w)
        return tilde_const

    def _forward(self, gt: GraphTensors, x, tilde_const, mask_w):
        if self.config.model == "theory_linear":
            preds = theory_gnn_forward(
                _csr_from(gt, tilde_const), x[:, 0], x[:, 1], self.params, self.theory_depth)
            return preds, preds
        if self.config.model == "gcn":
            vals = self._adj_values(gt, tilde_const, mask_w)
            rep, logits = self.model.forward(gt, x, adj_triple=(gt.tilde_rows, gt.tilde_cols,
                                                                vals))
        else:
            rep, logits = self.model.forward(gt, x, edge_mask=mask_w)
        return rep, logits

    # -- penalty ------------------------------------------------------------

    def _penalty(self, view, gt, rep, logits, epoch_idx, mask_w):
        kind = self.ocfg.kind
        if kind == "erm" or self.ocfg.lam == 0 or epoch_idx < self.ocfg.warmup:
            return None
        g = view.graph
        target = self._target_array(view)
        if kind in ("irmv1", "vrex"):
            partition = build_env_partition(g)
            if kind == "irmv1":
                return objectives.irmv1_penalty(logits, target, partition, self.task)
            per_env = [objectives.erm_loss(logits, target, rows, self.task)
                       for _, rows in partition.items()]
            return objectives.vrex_penalty(per_env)
        if kind == "cia":
            partition = build_env_partition(g)
            pairs = objectives.build_cia_pairs(
                g, partition, self.ocfg.pair_budget,
                stream(self.config.seed, f"pairs/{epoch_idx}"))
            return objectives.alignment_loss(rep, pairs)
        # cia_lra: neighborhood statistics on the masked adjacency, detached
        weights = mask_w.data if mask_w is not None else np.ones(g.edges.shape[0])
        kept = weights >= 0.5
        table = self._hop_table(g, kept)
        row_norm = row_norm_from_weights(gt, weights)
        profile = graphs.profile_from_row_norm(row_norm, g.labels, g.num_classes, self.layers)
        pairs = objectives.build_cia_lra_pairs(
            g.labels, g.split == TRAIN, profile, table, self.ocfg,
            stream(self.config.seed, f"pairs/{epoch_idx}"))
        return objectives.alignment_loss(rep, pairs)

    def _hop_table(self, g: Graph, kept: np.ndarray):
        key = kept.tobytes()
        if self._hop_cache[0] == key:
            return self._hop_cache[1]
        sub_edges = g.edges[kept]
        adj = graphs.csr_from_entries(
            g.num_nodes,
            np.concatenate([sub_edges[:, 0], sub_edges[:, 1]]),
            np.concatenate([sub_edges[:, 1], sub_edges[:, 0]]),
            np.ones(2 * sub_edges.shape[0]))
        table = graphs.bounded_paths_from_csr(g.num_nodes, adj.indptr, adj.indices,
                                              self.ocfg.hops)
        self._hop_cache = (key, table)
        return table

    def _target_array(self, view):
        if self.task == "regression":
            return view.targets
        return graphs.one_hot(view.graph.labels, view.graph.num_classes)

    # -- evaluation ----------------------------------------------------------

    def _evaluate(self, mask_w_full):
        rep, out = self._forward(self.full_gt, self.graph.features,
                                 self.full_tilde, mask_w_full)
        logits = out.data
        rec = {}
        if self.task == "regression":
            edges_q = np.quantile(self.targets[self.graph.split == TRAIN],
                                  np.linspace(0, 1, self.graph.num_classes + 1)[1:-1])
            pred_bins = np.searchsorted(edges_q, logits, side="right")
            for name, code in (("train", TRAIN), ("val", VAL), ("test", TEST)):
                rows = self.graph.split_indices(code)
                rec[name] = float((pred_bins[rows] == self.graph.labels[rows]).mean()) \
                    if rows.size else 0.0
        else:
            for name, code in (("train", TRAIN), ("val", VAL), ("test", TEST)):
                rows = self.graph.split_indices(code)
                rec[name] = metrics.ood_accuracy(logits, self.graph.labels, rows) \
                    if rows.size else 0.0
        inv_var = sp_norm = None
        if self.direct:
            vals = self._adj_values(self.full_gt, self.full_tilde, mask_w_full)
            diag = self.model.contribution_split(self.full_gt, self.graph.features, vals)
            inv_var = metrics.invariant_variance(diag, self.graph.labels)
            sp_norm = metrics.spurious_norm(diag)
        return rec, inv_var, sp_norm

    # -- main loop ------------------------------------------------------------

    def run(self):
        cfg = self.config
        records = []
        t0 = time.perf_counter()
        full_view = _SubgraphView(self.graph, self.targets,
                                  np.arange(self.graph.num_nodes))

        def eval_record(epoch, erm_val, pen_val, total_val):
            mask_w = self._mask_values(self.full_gt, self.graph.features, self.full_tilde)
            accs, inv_var, sp_norm = self._evaluate(mask_w)
            return TrainingRecord(
                epoch=epoch, erm_loss=erm_val, penalty=pen_val, total_loss=total_val,
                train_accuracy=accs["train"], val_accuracy=accs["val"],
                test_accuracy=accs["test"], invariant_variance=inv_var,
                spurious_norm=sp_norm, wall_ms=(time.perf_counter() - t0) * 1e3)

        init_erm = self._loss_only(full_view)
        records.append(eval_record(0, init_erm, 0.0, init_erm))
        for epoch in range(1, cfg.epochs + 1):
            epoch_idx = epoch - 1
            view, gt, tilde_const = self._epoch_view(full_view, epoch_idx)
            tape.zero_grad(self.params)
            if self.mask_enabled:
                tape.zero_grad(self.mask.params())
            mask_w = self._mask_values(gt, view.graph.features, tilde_const)
            rep, logits = self._forward(gt, view.graph.features, tilde_const, mask_w)
            train_rows = view.graph.split_indices(TRAIN)
            erm = objectives.erm_loss(logits, self._target_array(view), train_rows, self.task)
            penalty = self._penalty(view, gt, rep, logits, epoch_idx, mask_w)
            total = objectives.total_loss(self.ocfg, erm, penalty, epoch_idx)
            tape.backward(total)
            self.adam.step(self.params)
            if self.mask_enabled:
                self.mask_adam.step(self.mask.params())
            pen_val = float(penalty.data) if penalty is not None \
                and epoch_idx >= self.ocfg.warmup else 0.0
            records.append(eval_record(epoch, float(erm.data), pen_val, float(total.data)))
        summary = self._summary(records)
        return records, summary

    def _loss_only(self, view):
        mask_w = self._mask_values(self.full_gt, self.graph.features, self.full_tilde)
        _, logits = self._forward(self.full_gt, view.graph.features,
                                  self.full_tilde, mask_w)
        rows = view.graph.split_indices(TRAIN)
        return float(objectives.erm_loss(logits, self._target_array(view), rows,
                                         self.task).data)

    def _epoch_view(self, full_view, epoch_idx):
        n = self.graph.num_nodes
        size = self.config.subgraph
        if size and size < n:
            rng = stream(self.config.seed, f"subgraph/{epoch_idx}")
            nodes = np.sort(rng.choice(n, size=size, replace=False))
            view = _SubgraphView(self.graph, self.targets, nodes)
            gt = GraphTensors(view.graph.num_nodes, view.graph.edges)
            return view, gt, unmasked_tilde_values(gt)
        return full_view, self.full_gt, self.full_tilde

    def _summary(self, records):
        best = max(records[1:] if len(records) > 1 else records,
                   key=lambda r: (r.val_accuracy, -r.epoch))
        final = records[-1]
        cfg = {k: v for k, v in asdict(self.config).items()}
        return {
            "best_epoch": best.epoch,
            "best_val_accuracy": best.val_accuracy,
            "test_accuracy_at_best": next(r.test_accuracy for r in records
                                          if r.epoch == best.epoch),
            "final_epoch": final.epoch,
            "final_test_accuracy": final.test_accuracy,
            "final_erm_loss": final.erm_loss,
            "config": cfg,
        }

    def checkpoint_arrays(self) -> dict:
        if self.config.model == "theory_linear":
            named = {f"theta_{k}": v.data for k, v in zip(
                ["1", "2"] + [f"l{i}" for i in range(len(self.params) - 2)], self.params)}
        else:
            named = dict(zip(self.model.param_names(), (p.data for p in self.model.params())))
        if self.mask_enabled:
            named.update(dict(zip(self.mask.param_names(),
                                  (p.data for p in self.mask.params()))))
        return named


def _csr_from(gt: GraphTensors, tilde_vals: np.ndarray):
    return graphs.csr_from_entries(gt.n, gt.tilde_rows, gt.tilde_cols, tilde_vals)


def train_run(config: RunConfig, out_dir: str = None):
    """Run training; optionally write records.jsonl, summary.json and
    checkpoint.json into out_dir. Returns (records, summary)."""
    trainer = Trainer(config)
    records, summary = trainer.run()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "records.jsonl"), "w", encoding="utf-8",
                  newline="\n") as fh:
            for rec in records:
                fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8",
                  newline="\n") as fh:
            json.dump(summary, fh, sort_keys=True, indent=1)
            fh.write("\n")
        save_checkpoint(os.path.join(out_dir, "checkpoint.json"),
                        trainer.checkpoint_arrays())
    return records, summary
