"""Flow-based graph construction and the user-graph / line-graph baselines.

In the flow graph every flow is a node, and two flows are linked when they
share a source endpoint or share a destination endpoint. Each edge carries
the cosine similarity of the two flows' feature vectors.
"""

from __future__ import annotations

import json
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import blob
from .ingest import FlowRecord, labels_of

ZERO_NORM = 1e-12
HUB_LIMIT = 10_000
DEFAULT_WINDOW = 1024
KEY_MODES = ("address", "address+port")


class HubEndpointError(ValueError):
    pass


def endpoint_key(addr: str, port: int, key_mode: str = "address") -> Hashable:
    if key_mode == "address":
        return addr
    if key_mode == "address+port":
        return (addr, port)
    raise ValueError(f"key_mode must be one of {KEY_MODES}, got {key_mode!r}")


def src_key(r: FlowRecord, key_mode: str = "address") -> Hashable:
    return endpoint_key(r.src_addr, r.src_port, key_mode)


def dst_key(r: FlowRecord, key_mode: str = "address") -> Hashable:
    return endpoint_key(r.dst_addr, r.dst_port, key_mode)


@dataclass(eq=False)
class FlowGraph:
    """Undirected weighted graph over flow indices.

    ``edges`` is an (E, 2) int array with ``i < j`` on every row, sorted and
    free of duplicates; ``weights[k]`` is the similarity of edge ``k``.
    """

    n_nodes: int
    edges: np.ndarray
    weights: np.ndarray
    node_features: np.ndarray
    node_labels: np.ndarray | None = None
    provenance: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.provenance is None:
            self.provenance = np.arange(self.n_nodes, dtype=np.int64)
        if len(self.weights) != len(self.edges):
            raise ValueError("weights and edges differ in length")
        if self.node_features.shape[0] != self.n_nodes:
            raise ValueError("node_features row count differs from n_nodes")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def neighbors(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            nb[i].append(int(j))
            nb[j].append(int(i))
        return nb

    def to_json(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            node = {"id": i, "provenance": int(self.provenance[i])}
            if self.node_labels is not None:
                node["label"] = int(self.node_labels[i])
            nodes.append(node)
        return {
            "format": "flowgnn-graph/1",
            "n_nodes": self.n_nodes,
            "nodes": nodes,
            "edges": [[int(i), int(j), float(w)] for (i, j), w in zip(self.edges, self.weights)],
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    def save_binary(self, path: str | Path) -> None:
        arrays = {"edges": self.edges, "weights": self.weights, "provenance": self.provenance}
        if self.node_labels is not None:
            arrays["labels"] = np.asarray(self.node_labels, dtype=np.int64)
        blob.save(path, "flow-adjacency", {"n_nodes": self.n_nodes}, arrays)

    @classmethod
    def load_binary(cls, path: str | Path, node_features: np.ndarray | None = None) -> "FlowGraph":
        meta, a = blob.load(path, "flow-adjacency")
        n = meta["n_nodes"]
        feats = node_features if node_features is not None else np.zeros((n, 0))
        return cls(n, a["edges"], a["weights"], feats, a.get("labels"), a["provenance"])


def cosine_similarity(u, v) -> float:
    """Cosine similarity; 0 when either vector has (near) zero norm."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.sqrt(np.dot(u, u))
    nv = np.sqrt(np.dot(v, v))
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def edge_cosines(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Vectorized cosine similarity for every row of ``edges``."""
    if len(edges) == 0:
        return np.zeros(0)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    i, j = edges[:, 0], edges[:, 1]
    dots = np.einsum("ij,ij->i", x[i], x[j])
    denom = norms[i] * norms[j]
    zero = (norms[i] < ZERO_NORM) | (norms[j] < ZERO_NORM)
    out = np.divide(dots, denom, out=np.zeros_like(dots), where=~zero)
    return np.clip(out, -1.0, 1.0)


def _group_pairs(keys: Sequence[Hashable], n: int) -> np.ndarray:
    """Encoded pairs ``i * n + j`` (i < j) for indices sharing a key."""
    groups: dict[Hashable, list[int]] = defaultdict(list)
    for idx, k in enumerate(keys):
        groups[k].append(idx)
    chunks = []
    for k, members in groups.items():
        m = len(members)
        if m < 2:
            continue
        if m > HUB_LIMIT:
            raise HubEndpointError(
                f"endpoint {k!r} groups {m} flows in one window (limit {HUB_LIMIT}); "
                "use a smaller --window")
        idx = np.asarray(members, dtype=np.int64)
        a, b = np.triu_indices(m, k=1)
        chunks.append(idx[a] * n + idx[b])
    if not chunks:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(chunks)


def build_flow_graph(records: Sequence[FlowRecord], features: np.ndarray,
                     key_mode: str = "address") -> FlowGraph:
    """Link flows that share a source endpoint or a destination endpoint.

    Pairs are emitted per endpoint group, so the cost is the number of edges
    rather than n^2.
    """
    n = len(records)
    features = np.asarray(features, dtype=float)
    if features.shape[0] != n:
        raise ValueError(f"features has {features.shape[0]} rows for {n} records")
    codes = np.concatenate([
        _group_pairs([src_key(r, key_mode) for r in records], n),
        _group_pairs([dst_key(r, key_mode) for r in records], n),
    ])
    codes = np.unique(codes)
    edges = np.stack([codes // max(n, 1), codes % max(n, 1)], axis=1) if len(codes) else np.zeros((0, 2), np.int64)
    labels = labels_of(records) if records and records[0].label is not None else None
    return FlowGraph(n, edges, edge_cosines(features, edges), features, labels)


def window_slices(n: int, window: int = DEFAULT_WINDOW) -> list[slice]:
    if window < 1:
        raise ValueError("window must be >= 1")
    return [slice(s, min(s + window, n)) for s in range(0, n, window)]


def build_window_graphs(records: Sequence[FlowRecord], features: np.ndarray,
                        window: int = DEFAULT_WINDOW, key_mode: str = "address") -> list[FlowGraph]:
    """One flow graph per consecutive window of ``window`` flows (dataset order)."""
    graphs = []
    for sl in window_slices(len(records), window):
        g = build_flow_graph(records[sl], features[sl], key_mode)
        g.provenance = np.arange(sl.start, sl.stop, dtype=np.int64)
        graphs.append(g)
    return graphs


@dataclass
class ClassicGraph:
    """Endpoints as nodes, one directed edge per flow (parallel edges allowed)."""

    nodes: list[Hashable]
    src: np.ndarray
    dst: np.ndarray
    edge_features: np.ndarray
    edge_labels: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def build_classic_graph(records: Sequence[FlowRecord], features: np.ndarray | None = None,
                        key_mode: str = "address") -> ClassicGraph:
    index: dict[Hashable, int] = {}

    def node(k):
        if k not in index:
            index[k] = len(index)
        return index[k]

    src = np.asarray([node(src_key(r, key_mode)) for r in records], dtype=np.int64)
    dst = np.asarray([node(dst_key(r, key_mode)) for r in records], dtype=np.int64)
    if features is None:
        n_f = len(records[0].features) if records else 0
        features = np.asarray([r.features for r in records], dtype=float).reshape(len(records), n_f)
    labels = labels_of(records) if records and records[0].label is not None else None
    return ClassicGraph(list(index), src, dst, np.asarray(features, dtype=float), labels)


def line_graph(g: ClassicGraph) -> FlowGraph:
    """Directed line graph, symmetrized.

    Flow-nodes ``a`` and ``b`` are linked when they form a directed path of
    length two in either order: ``dst(a) == src(b)`` or ``dst(b) == src(a)``.
    """
    m = g.n_edges
    out_by_node: dict[int, list[int]] = defaultdict(list)
    for e, s in enumerate(g.src):
        out_by_node[int(s)].append(e)
    chunks = []
    for a, d in enumerate(g.dst):
        followers = out_by_node.get(int(d))
        if not followers:
            continue
        b = np.asarray(followers, dtype=np.int64)
        b = b[b != a]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        chunks.append(lo * m + hi)
    codes = np.unique(np.concatenate(chunks)) if chunks else np.zeros(0, np.int64)
    edges = np.stack([codes // max(m, 1), codes % max(m, 1)], axis=1) if len(codes) else np.zeros((0, 2), np.int64)
    return FlowGraph(m, edges, edge_cosines(g.edge_features, edges), g.edge_features, g.edge_labels)


def adjacency_with_self_loops(g: FlowGraph, weighted: bool = True, clamp: bool = True) -> sp.csr_matrix:
    """Symmetric normalized adjacency D^-1/2 (A + I) D^-1/2 as a CSR matrix.

    In weighted mode the edge entries are the similarities, clamped to [0, 1]
    unless ``clamp`` is False (then a non-positive degree raises).
    """
    n = g.n_nodes
    if weighted:
        w = np.clip(g.weights, 0.0, 1.0) if clamp else g.weights
    else:
        w = np.ones(g.n_edges)
    i, j = g.edges[:, 0], g.edges[:, 1]
    rows = np.concatenate([i, j, np.arange(n)])
    cols = np.concatenate([j, i, np.arange(n)])
    vals = np.concatenate([w, w, np.ones(n)])
    a_hat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    if np.any(deg <= 1e-9):
        bad = int(np.argmin(deg))
        raise ValueError(
            f"node {bad} has non-positive degree {deg[bad]:.3g}; clamp similarity weights to [0, 1]")
    d = sp.diags(1.0 / np.sqrt(deg))
    return (d @ a_hat @ d).tocsr()


def graph_stats(g: FlowGraph, build_seconds: float | None = None) -> dict:
    n = g.n_nodes
    if n == 0:
        stats = {"n_nodes": 0, "n_edges": 0, "n_components": 0, "degree_histogram": {}}
    else:
        adj = sp.csr_matrix((np.ones(g.n_edges), (g.edges[:, 0], g.edges[:, 1])), shape=(n, n))
        n_comp, _ = connected_components(adj, directed=False)
        deg = np.bincount(g.edges.ravel(), minlength=n)
        vals, counts = np.unique(deg, return_counts=True)
        stats = {
            "n_nodes": n,
            "n_edges": g.n_edges,
            "n_components": int(n_comp),
            "degree_histogram": {int(v): int(c) for v, c in zip(vals, counts)},
        }
    if build_seconds is not None:
        stats["build_seconds"] = build_seconds
    return stats


def component_labels(g: FlowGraph) -> np.ndarray:
    n = g.n_nodes
    adj = sp.csr_matrix((np.ones(g.n_edges), (g.edges[:, 0], g.edges[:, 1])), shape=(n, n))
    return connected_components(adj, directed=False)[1]


def timed_build(records: Sequence[FlowRecord], features: np.ndarray, key_mode: str = "address"):
    t0 = time.perf_counter()
    g = build_flow_graph(records, features, key_mode)
    return g, time.perf_counter() - t0
