"""Split -> fit preprocessing on train -> window graphs -> train -> score test."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .eval import TEST, TRAIN, EvalReport, SplitPlan, compute_metrics, make_ip_split, random_split, threshold_sweep
from .graph import FlowGraph, build_window_graphs
from .ingest import FeatureSchema, FlowRecord, Scaler, fit_scaler, transform
from .pipeline import FlowGNN, ModelConfig, ScoredFlow, TrainResult, classify_graphs, train

DEFAULT_SWEEP = tuple(np.round(np.arange(-8.0, 8.01, 0.5), 3))


@dataclass
class Preprocessor:
    schema: FeatureSchema
    scaler: Scaler

    @classmethod
    def fit(cls, train_records: Sequence[FlowRecord], schema: FeatureSchema) -> "Preprocessor":
        return cls(schema.fit_vocabularies(train_records), fit_scaler(train_records))

    def __call__(self, records: Sequence[FlowRecord]) -> np.ndarray:
        return transform(records, self.scaler, self.schema)

    def to_dict(self) -> dict:
        return {"schema": self.schema.to_dict(), "scaler": self.scaler.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        return cls(FeatureSchema.from_dict(d["schema"]), Scaler.from_dict(d["scaler"]))


def make_graphs(records: Sequence[FlowRecord], prep: Preprocessor, config: ModelConfig) -> list[FlowGraph]:
    return build_window_graphs(records, prep(records), config.window, config.key_mode)


@dataclass
class ExperimentResult:
    plan: SplitPlan
    report: EvalReport
    train_result: TrainResult
    scored: list[ScoredFlow]
    prep: Preprocessor

    @property
    def model(self) -> FlowGNN:
        return self.train_result.model

    def summary(self) -> dict:
        r = self.report
        return {"split": self.plan.kind, "f1": r.f1, "precision": r.precision, "recall": r.recall,
                "fpr": r.fpr, "auc": r.auc, "n_test": len(self.scored),
                "n_dropped": self.plan.n_dropped, "epochs": len(self.train_result.history),
                "final_loss": self.train_result.losses[-1],
                "threshold": self.train_result.threshold, "best_epoch": self.train_result.best_epoch}


def split_records(records: Sequence[FlowRecord], split: str, config: ModelConfig,
                  fallback: bool = False) -> SplitPlan:
    if split == "ip":
        return make_ip_split(records, seed=config.seed, fraction=config.split_fraction, fallback=fallback)
    if split == "random":
        return random_split(records, config.split_fraction, config.seed)
    raise ValueError(f"split must be 'ip' or 'random', got {split!r}")


def validation_split(train_recs: Sequence[FlowRecord], split: str,
                     config: ModelConfig) -> tuple[list[FlowRecord], list[FlowRecord]]:
    """Carve a validation set out of the training partition with the same split rule.

    Under the IP split the validation side holds endpoints (and where possible
    attack types) the fitting side never sees, so early stopping rewards
    generalisation rather than memorisation. Returns ``(fit, [])`` when the
    partition cannot be split with both sides labelled in both classes.
    """
    cfg = replace(config, split_fraction=1.0 - config.val_fraction)
    try:
        plan = split_records(train_recs, split, cfg, fallback=True)
    except ValueError:
        return list(train_recs), []
    fit, val = plan.select(train_recs, TRAIN), plan.select(train_recs, TEST)
    if any(len({r.label for r in part}) < 2 for part in (fit, val)):
        return list(train_recs), []
    return fit, val


def run_experiment(records: Sequence[FlowRecord], schema: FeatureSchema, config: ModelConfig,
                   split: str = "ip", sweep_grid: Sequence[float] = DEFAULT_SWEEP,
                   fallback: bool = False) -> ExperimentResult:
    plan = split_records(records, split, config, fallback)
    train_recs = plan.select(records, TRAIN)
    test_recs = plan.select(records, TEST)
    if not train_recs or not test_recs:
        raise ValueError(f"{split} split left an empty partition "
                         f"(train={len(train_recs)}, test={len(test_recs)})")
    prep = Preprocessor.fit(train_recs, schema)
    fit_recs, val_recs = train_recs, []
    if config.val_fraction > 0:
        fit_recs, val_recs = validation_split(train_recs, split, config)
    result = train(make_graphs(fit_recs, prep, config), config,
                   make_graphs(val_recs, prep, config) if val_recs else None)
    scored = classify_graphs(make_graphs(test_recs, prep, config), result.model, result.threshold)
    # provenance is relative to the test partition; map back to dataset rows
    test_idx = plan.indices(TEST)
    for f in scored:
        f.index = int(test_idx[f.index])
    report = compute_metrics(scored)
    report.sweep = threshold_sweep(scored, sweep_grid)
    return ExperimentResult(plan, report, result, scored, prep)
