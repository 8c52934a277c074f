"""Three-branch flow classifier: structure-agnostic MLP, GCN branch, attention branch.

    Z0      = GSA-MLP(x)                  (ignores topology)
    h_sfe   = GCN2(GCN1(Z0, A_norm), A_norm)
    h_afe   = GAT(Z0, graph)
    logits  = scorer-MLP([h_sfe | h_afe])
    P_m     = logits[:, malicious] - logits[:, normal]

A flow is alerted when ``P_m > threshold``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, blob
from .graph import FlowGraph, adjacency_with_self_loops
from .ingest import MALICIOUS, NORMAL
from .nn import GATLayer, GCNLayer, MLP, Adam, AttentionIndex, Param, cross_entropy_loss

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    gsa_sizes: tuple[int, ...] = (64, 32)
    gcn_sizes: tuple[int, ...] = (32, 32)
    gat_size: int = 32
    scorer_sizes: tuple[int, ...] = (32, 16)
    weighted: bool = True
    similarity_attention: bool = True
    leaky_slope: float = 0.2
    error_term: bool = False
    threshold: float = 0.0
    seed: int = 0
    epochs: int = 200
    patience: int = 20
    window: int = 1024
    key_mode: str = "address"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-6
    split_fraction: float = 0.7
    val_fraction: float = 0.0
    calibrate_threshold: bool = False

    def __post_init__(self):
        self.gsa_sizes = tuple(self.gsa_sizes)
        self.gcn_sizes = tuple(self.gcn_sizes)
        self.scorer_sizes = tuple(self.scorer_sizes)
        if not self.gsa_sizes or not self.gcn_sizes:
            raise ValueError("gsa_sizes and gcn_sizes need at least one layer each")
        if len(self.gcn_sizes) != 2:
            raise ValueError("the spatial branch has exactly two GCN layers")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.key_mode not in ("address", "address+port"):
            raise ValueError(f"bad key_mode {self.key_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("gsa_sizes", "gcn_sizes", "scorer_sizes"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ScoredFlow:
    index: int
    score: float
    decision: int
    label: int | None = None

    def to_dict(self) -> dict:
        return {"index": self.index, "score": self.score,
                "decision": "malicious" if self.decision == MALICIOUS else "normal",
                "label": None if self.label is None else
                ("malicious" if self.label == MALICIOUS else "normal")}


class TrainingDiverged(RuntimeError):
    pass


def _graph_tensors(g: FlowGraph, weighted: bool):
    key = ("tensors", weighted)
    if key not in g._cache:
        g._cache[key] = (adjacency_with_self_loops(g, weighted=weighted),
                         AttentionIndex.from_edges(g.n_nodes, g.edges, g.weights))
    return g._cache[key]


class FlowGNN:
    def __init__(self, config: ModelConfig, d_in: int):
        self.config = config
        self.d_in = d_in
        rng = np.random.default_rng(config.seed)
        c = config
        self.gsa = MLP([d_in, *c.gsa_sizes], rng, last_activation="relu")
        z = c.gsa_sizes[-1]
        self.gcn1 = GCNLayer(z, c.gcn_sizes[0], rng)
        self.gcn2 = GCNLayer(c.gcn_sizes[0], c.gcn_sizes[1], rng)
        self.gat = GATLayer(z, c.gat_size, rng, c.leaky_slope, c.similarity_attention)
        self.scorer = MLP([c.gcn_sizes[1] + c.gat_size, *c.scorer_sizes, 2], rng,
                          last_activation="none", error_term=c.error_term)

    def params(self) -> dict[str, Param]:
        out = {}
        for prefix, mod in (("gsa", self.gsa), ("gcn1", self.gcn1), ("gcn2", self.gcn2),
                            ("gat", self.gat), ("scorer", self.scorer)):
            for k, p in mod.params().items():
                out[f"{prefix}.{k}"] = p
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def forward(self, g: FlowGraph, err: np.ndarray | None = None) -> np.ndarray:
        """Two-column logits (normal, malicious) for every node of ``g``."""
        if g.node_features.shape[1] != self.d_in:
            raise ValueError(f"graph features have dim {g.node_features.shape[1]}, model expects {self.d_in}")
        adj, index = _graph_tensors(g, self.config.weighted)
        z0 = self.gsa.forward(g.node_features)
        h_sfe = self.gcn2.forward(self.gcn1.forward(z0, adj), adj)
        h_afe = self.gat.forward(z0, index)
        self._split = h_sfe.shape[1]
        return self.scorer.forward(np.hstack([h_sfe, h_afe]), err)

    def backward(self, dlogits: np.ndarray) -> None:
        dcomb = self.scorer.backward(dlogits)
        d_sfe, d_afe = dcomb[:, :self._split], dcomb[:, self._split:]
        dz = self.gcn1.backward(self.gcn2.backward(d_sfe))
        dz = dz + self.gat.backward(d_afe)
        self.gsa.backward(dz)

    def scores(self, g: FlowGraph, err: np.ndarray | None = None) -> np.ndarray:
        logits = self.forward(g, err)
        return logits[:, MALICIOUS] - logits[:, NORMAL]

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"version": __version__, "config": self.config.to_dict(), "d_in": self.d_in,
                "extra": extra or {}}
        blob.save(path, "flowgnn-checkpoint", meta, {k: p.value for k, p in self.params().items()})

    @classmethod
    def load(cls, path: str | Path) -> tuple["FlowGNN", dict]:
        meta, arrays = blob.load(path, "flowgnn-checkpoint")
        model = cls(ModelConfig.from_dict(meta["config"]), meta["d_in"])
        params = model.params()
        if set(params) != set(arrays):
            raise ValueError(f"checkpoint tensors {sorted(arrays)} do not match config {sorted(params)}")
        for k, p in params.items():
            if arrays[k].shape != p.value.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape}, config shape {p.value.shape}")
            p.value[...] = arrays[k]
        return model, meta.get("extra", {})


@dataclass
class TrainResult:
    model: FlowGNN
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    threshold: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def _validate(model: FlowGNN, val_graphs: Sequence[FlowGraph], config: ModelConfig) -> dict:
    from .eval import CALIBRATION_GRID, auc_midrank, best_threshold, compute_metrics

    logits = np.vstack([model.forward(g) for g in val_graphs if g.n_nodes])
    labels = np.concatenate([g.node_labels for g in val_graphs if g.n_nodes])
    scores = logits[:, MALICIOUS] - logits[:, NORMAL]
    row = {"val_loss": cross_entropy_loss(logits, labels)[0], "val_auc": auc_midrank(scores, labels)}
    if config.calibrate_threshold:
        row["val_threshold"], row["val_f1"] = best_threshold(scores, labels, CALIBRATION_GRID)
    else:
        dec = np.where(scores > config.threshold, MALICIOUS, NORMAL)
        row["val_threshold"] = config.threshold
        row["val_f1"] = compute_metrics(
            [ScoredFlow(i, s, d, y) for i, (s, d, y) in enumerate(zip(scores, dec, labels))]).f1
    return row


def train(graphs: Sequence[FlowGraph], config: ModelConfig,
          val_graphs: Sequence[FlowGraph] | None = None) -> TrainResult:
    """Full-batch Adam over each window graph in turn, ``config.epochs`` times.

    With validation graphs, training stops after ``config.patience`` epochs
    without a validation-F1 improvement (ties broken by lower validation loss)
    and the best parameters are restored. If ``config.calibrate_threshold`` is
    set, validation F1 is taken at the best threshold on a fixed grid and that
    threshold becomes the returned model's decision threshold.
    """
    graphs = [g for g in graphs if g.n_nodes > 0]
    if not graphs:
        raise ValueError("no non-empty training graphs")
    if any(g.node_labels is None or np.any(g.node_labels < 0) for g in graphs):
        raise ValueError("training graphs must carry labels for every node")
    val_graphs = [g for g in (val_graphs or []) if g.n_nodes > 0]
    model = FlowGNN(config, graphs[0].node_features.shape[1])
    opt = Adam(model.params(), lr=config.lr, beta1=config.beta1, beta2=config.beta2,
               eps=config.eps, weight_decay=config.weight_decay)
    result = TrainResult(model, threshold=config.threshold)
    best_key, best_state, stale = None, None, 0
    total = sum(g.n_nodes for g in graphs)
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        for g in graphs:
            opt.zero_grad()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = model.forward(g)
                    loss, dlogits = cross_entropy_loss(logits, g.node_labels)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"{exc} at epoch {epoch}; lower the learning rate (now {config.lr})") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}; lower the learning rate (now {config.lr})")
            model.backward(dlogits)
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step()
            epoch_loss += loss * g.n_nodes / total
        row = {"epoch": epoch, "loss": epoch_loss}
        if val_graphs:
            row.update(_validate(model, val_graphs, config))
            key = (round(row["val_f1"], 9), -row["val_loss"])
            if best_key is None or key > best_key:
                best_key, stale, result.best_epoch = key, 0, epoch
                result.threshold = row["val_threshold"]
                best_state = {k: p.value.copy() for k, p in model.params().items()}
            else:
                stale += 1
        result.history.append(row)
        log.debug("epoch %d loss %.5f", epoch, epoch_loss)
        if val_graphs and stale >= config.patience:
            break
    if best_state is not None:
        for k, p in model.params().items():
            p.value[...] = best_state[k]
    model.config = replace(config, threshold=result.threshold)
    return result


def classify(g: FlowGraph, model: FlowGNN, threshold: float) -> list[ScoredFlow]:
    s = model.scores(g)
    labels = g.node_labels
    return [ScoredFlow(int(g.provenance[i]), float(s[i]),
                       MALICIOUS if s[i] > threshold else NORMAL,
                       None if labels is None or labels[i] < 0 else int(labels[i]))
            for i in range(g.n_nodes)]


def classify_graphs(graphs: Sequence[FlowGraph], model: FlowGNN, threshold: float) -> list[ScoredFlow]:
    out: list[ScoredFlow] = []
    for g in graphs:
        if g.n_nodes:
            out.extend(classify(g, model, threshold))
    return out


def alert_count(scored: Sequence[ScoredFlow]) -> int:
    return sum(f.decision == MALICIOUS for f in scored)
