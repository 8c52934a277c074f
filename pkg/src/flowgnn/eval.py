"""Train/test splitting, detection metrics, ROC/AUC and threshold sweeps.

The endpoint-disjoint split keeps every endpoint address on one side only, so
near-duplicate flows from the same host cannot appear in both partitions;
attackers are grouped so that, where the data allows, the two sides see
different attack types. ``random_split`` is the per-flow baseline that leaks.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .ingest import MALICIOUS, NORMAL, FlowRecord
from .pipeline import ScoredFlow

TRAIN, TEST, DROPPED = 0, 1, 2
_SIDE_NAMES = {TRAIN: "train", TEST: "test", DROPPED: "dropped"}


class SplitError(ValueError):
    pass


@dataclass
class SplitPlan:
    kind: str
    assignment: np.ndarray
    train_endpoints: frozenset[str]
    test_endpoints: frozenset[str]
    train_attack_types: frozenset[str] = frozenset()
    test_attack_types: frozenset[str] = frozenset()
    seed: int = 0

    @property
    def n_dropped(self) -> int:
        return int(np.sum(self.assignment == DROPPED))

    @property
    def endpoint_overlap(self) -> frozenset[str]:
        return self.train_endpoints & self.test_endpoints

    @property
    def type_overlap(self) -> frozenset[str]:
        return self.train_attack_types & self.test_attack_types

    def indices(self, side: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == side)

    def select(self, records: Sequence, side: int) -> list:
        return [records[i] for i in self.indices(side)]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "train_endpoints": sorted(self.train_endpoints),
            "test_endpoints": sorted(self.test_endpoints),
            "train_attack_types": sorted(self.train_attack_types),
            "test_attack_types": sorted(self.test_attack_types),
            "counts": {name: int(np.sum(self.assignment == side)) for side, name in _SIDE_NAMES.items()},
            "endpoint_overlap": len(self.endpoint_overlap),
            "attack_type_overlap": sorted(self.type_overlap),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def attacker_table(records: Sequence[FlowRecord]) -> dict[str, int]:
    """Malicious-flow count per source address."""
    counts: dict[str, int] = defaultdict(int)
    for r in records:
        if r.label == MALICIOUS:
            counts[r.src_addr] += 1
    return dict(sorted(counts.items()))


def _types_by_attacker(records, attackers) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {a: set() for a in attackers}
    for r in records:
        if r.label == MALICIOUS and r.src_addr in out and r.attack_type:
            out[r.src_addr].add(r.attack_type)
    return out


def _type_groups(types: dict[str, set[str]]) -> list[list[str]]:
    """Attackers joined (union-find) whenever they share an attack type."""
    parent = {a: a for a in types}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    owner: dict[str, str] = {}
    for a in sorted(types):
        for t in sorted(types[a]):
            if t in owner:
                parent[find(a)] = find(owner[t])
            else:
                owner[t] = a
    groups: dict[str, list[str]] = defaultdict(list)
    for a in sorted(types):
        groups[find(a)].append(a)
    return list(groups.values())


def _greedy_sides(items: list, weight: Mapping, fraction: float) -> tuple[list, list]:
    """Largest-first assignment that keeps train's weight share close to ``fraction``."""
    train, test = [], []
    wt = wv = 0.0
    for it in items:
        w = weight[it]
        err_train = abs((wt + w) - fraction * (wt + wv + w))
        err_test = abs(wt - fraction * (wt + wv + w))
        if err_train <= err_test:
            train.append(it)
            wt += w
        else:
            test.append(it)
            wv += w
    return train, test


def make_ip_split(records: Sequence[FlowRecord], table: Mapping[str, int] | None = None,
                  seed: int = 0, fraction: float = 0.7, fallback: bool = False) -> SplitPlan:
    """Endpoint-disjoint split with (best-effort) disjoint attack types.

    1. Attackers sharing an attack type are grouped; whole groups go to one
       side, largest first, aiming at ``fraction`` of malicious volume in train.
    2. Endpoints that only receive or send benign traffic but talk to
       attackers follow the side they exchange most flows with.
    3. Remaining endpoints are shuffled (seeded) and dealt out by flow volume.
    4. A flow is kept only if both endpoints landed on the same side.

    ``table`` maps attacker address to malicious-flow count; it defaults to
    the counts found in ``records``.
    """
    if not 0 < fraction < 1:
        raise SplitError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    table = dict(table) if table is not None else attacker_table(records)
    attackers = sorted(table)
    types = _types_by_attacker(records, attackers)
    all_types = set().union(*types.values()) if types else set()
    if len(attackers) < 2 or len(all_types) < 2:
        if not fallback:
            raise SplitError(
                f"an IP-based split needs >= 2 attackers and >= 2 attack types "
                f"(found {len(attackers)} and {len(all_types)}); pass fallback=True "
                "for an endpoint-only split")
        groups = [[a] for a in attackers]
    else:
        groups = _type_groups(types)
        if len(groups) < 2:
            groups = [[a] for a in attackers]

    order = rng.permutation(len(groups))
    groups = [groups[i] for i in order]
    gw = {i: float(sum(table[a] for a in grp)) for i, grp in enumerate(groups)}
    ids = sorted(range(len(groups)), key=lambda i: -gw[i])
    tr_ids, te_ids = _greedy_sides(ids, gw, fraction)
    if not te_ids and len(tr_ids) > 1:
        te_ids.append(tr_ids.pop())
    if not tr_ids and len(te_ids) > 1:
        tr_ids.append(te_ids.pop())
    side: dict[str, int] = {}
    for i in tr_ids:
        for a in groups[i]:
            side[a] = TRAIN
    for i in te_ids:
        for a in groups[i]:
            side[a] = TEST

    # endpoints in contact with attackers follow them
    contact: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    volume: dict[str, int] = defaultdict(int)
    for r in records:
        volume[r.src_addr] += 1
        volume[r.dst_addr] += 1
        for a, b in ((r.src_addr, r.dst_addr), (r.dst_addr, r.src_addr)):
            if a in side and b not in side:
                contact[b][side[a]] += 1
    for ep in sorted(contact):
        c = contact[ep]
        side[ep] = TRAIN if c[TRAIN] >= c[TEST] else TEST

    rest = sorted(ep for ep in volume if ep not in side)
    rest = [rest[i] for i in rng.permutation(len(rest))]
    tr_rest, te_rest = _greedy_sides(rest, volume, fraction)
    for ep in tr_rest:
        side[ep] = TRAIN
    for ep in te_rest:
        side[ep] = TEST
    return _plan_from_sides("ip", records, side, seed)


def _plan_from_sides(kind, records, side, seed) -> SplitPlan:
    assign = np.full(len(records), DROPPED, dtype=np.int64)
    for k, r in enumerate(records):
        s, d = side.get(r.src_addr), side.get(r.dst_addr)
        if s is not None and s == d:
            assign[k] = s
    tr_ep = frozenset(a for a, s in side.items() if s == TRAIN)
    te_ep = frozenset(a for a, s in side.items() if s == TEST)
    return SplitPlan(kind, assign, tr_ep, te_ep,
                     _types_on(records, assign, TRAIN), _types_on(records, assign, TEST), seed)


def _types_on(records, assign, which) -> frozenset[str]:
    return frozenset(r.attack_type for r, s in zip(records, assign)
                     if s == which and r.label == MALICIOUS and r.attack_type)


def _endpoints_on(records, assign, which) -> frozenset[str]:
    out = set()
    for r, s in zip(records, assign):
        if s == which:
            out.add(r.src_addr)
            out.add(r.dst_addr)
    return frozenset(out)


def random_split(records: Sequence[FlowRecord], fraction: float = 0.7, seed: int = 0) -> SplitPlan:
    """Per-flow coin flip; endpoints (and near-duplicate flows) end up on both sides."""
    if not 0 < fraction < 1:
        raise SplitError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    assign = np.where(rng.random(len(records)) < fraction, TRAIN, TEST).astype(np.int64)
    return SplitPlan("random", assign,
                     _endpoints_on(records, assign, TRAIN), _endpoints_on(records, assign, TEST),
                     _types_on(records, assign, TRAIN), _types_on(records, assign, TEST), seed)


# ------------------------------------------------------------------ metrics


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    fpr: float
    auc: float | None
    roc: list[tuple[float, float]] = field(default_factory=list)
    sweep: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "fpr": self.fpr, "auc": self.auc,
            "roc": [list(p) for p in self.roc],
            "sweep": self.sweep,
        }

    def table(self) -> str:
        auc = "n/a" if self.auc is None else f"{self.auc:.4f}"
        return "\n".join([
            f"{'metric':<10} value",
            f"{'precision':<10} {self.precision:.4f}",
            f"{'recall':<10} {self.recall:.4f}",
            f"{'f1':<10} {self.f1:.4f}",
            f"{'fpr':<10} {self.fpr:.4f}",
            f"{'auc':<10} {auc}",
            f"{'tp/fp':<10} {self.tp}/{self.fp}",
            f"{'tn/fn':<10} {self.tn}/{self.fn}",
        ])

    def roc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        w.writerows(self.roc)
        return buf.getvalue()


def _rates(tp, fp, tn, fn):
    if tp + fp == 0:
        precision = 1.0 if tp + fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return precision, recall, f1, fpr


def auc_midrank(scores, labels) -> float | None:
    """Mann-Whitney AUC with average ranks for ties; None for one-class input."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == MALICIOUS))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[labels == MALICIOUS].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points from (0, 0) to (1, 1), one per distinct score (descending)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == MALICIOUS))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return []
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order] == MALICIOUS
    tps, fps = np.cumsum(y), np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    return [(0.0, 0.0)] + [(float(fps[k] / n_neg), float(tps[k] / n_pos)) for k in last]


def _confusion(decisions, labels):
    decisions = np.asarray(decisions)
    labels = np.asarray(labels)
    tp = int(np.sum((decisions == MALICIOUS) & (labels == MALICIOUS)))
    fp = int(np.sum((decisions == MALICIOUS) & (labels == NORMAL)))
    tn = int(np.sum((decisions == NORMAL) & (labels == NORMAL)))
    fn = int(np.sum((decisions == NORMAL) & (labels == MALICIOUS)))
    return tp, fp, tn, fn


def compute_metrics(scored: Sequence[ScoredFlow]) -> EvalReport:
    if any(f.label is None for f in scored):
        raise ValueError("compute_metrics needs a true label on every flow")
    labels = np.asarray([f.label for f in scored], dtype=np.int64)
    scores = np.asarray([f.score for f in scored], dtype=float)
    tp, fp, tn, fn = _confusion([f.decision for f in scored], labels)
    p, r, f1, fpr = _rates(tp, fp, tn, fn)
    return EvalReport(tp, fp, tn, fn, p, r, f1, fpr, auc_midrank(scores, labels),
                      roc_curve(scores, labels))


def threshold_sweep(scored: Sequence[ScoredFlow], grid: Sequence[float]) -> list[dict]:
    """Metrics at each threshold of an ascending grid (alert when score > S)."""
    grid = [float(s) for s in grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be ascending")
    labels = np.asarray([f.label for f in scored], dtype=np.int64)
    scores = np.asarray([f.score for f in scored], dtype=float)
    rows = []
    for s in grid:
        dec = np.where(scores > s, MALICIOUS, NORMAL)
        tp, fp, tn, fn = _confusion(dec, labels)
        p, r, f1, fpr = _rates(tp, fp, tn, fn)
        rows.append({"threshold": s, "alerts": tp + fp, "precision": p, "recall": r,
                     "f1": f1, "fpr": fpr})
    for a, b in zip(rows, rows[1:]):
        if b["recall"] > a["recall"] or b["fpr"] > a["fpr"]:
            raise AssertionError(f"sweep not monotone between S={a['threshold']} and S={b['threshold']}")
    return rows


CALIBRATION_GRID = tuple(np.round(np.arange(-10.0, 10.001, 0.25), 3))


def best_threshold(scores, labels, grid=CALIBRATION_GRID) -> tuple[float, float]:
    """Grid threshold with the highest F1, and that F1.

    When several adjacent grid points tie, the middle of the first tied run is
    returned, which keeps the decision boundary away from either edge.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels) == MALICIOUS
    grid = np.asarray(grid, dtype=float)
    alert = scores[None, :] > grid[:, None]
    tp = (alert & labels).sum(axis=1)
    fp = (alert & ~labels).sum(axis=1)
    fn = labels.sum() - tp
    f1 = np.array([_rates(a, b, 0, c)[2] for a, b, c in zip(tp, fp, fn)])
    top = np.isclose(f1, f1.max(), rtol=0, atol=1e-12)
    first = int(np.argmax(top))
    last = first
    while last + 1 < len(grid) and top[last + 1]:
        last += 1
    return float(grid[(first + last) // 2]), float(f1.max())


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["threshold", "alerts", "precision", "recall", "f1", "fpr"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
