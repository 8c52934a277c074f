"""Command-line entry point: ``flowgnn <subcommand> ...``.

Every subcommand writes a ``*.manifest.json`` next to its outputs recording
flags, resolved config, seeds, input digests, tool version and timing. Reports
themselves contain no timing, so reruns with the same manifest reproduce them
byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from . import __version__
from .eval import compute_metrics, sweep_csv, threshold_sweep
from .experiment import DEFAULT_SWEEP, Preprocessor, make_graphs, run_experiment
from .graph import build_classic_graph, build_flow_graph, build_window_graphs, graph_stats, line_graph
from .ingest import FeatureSchema, load_config, load_table, parse_dataset, save_table, undersample
from .pipeline import FlowGNN, ModelConfig, alert_count, classify_graphs, train
from .synth import PRESETS, ScenarioScript, default_schema, generate, write_csv

log = logging.getLogger("flowgnn")

# Published ToN IoT results for the weighted-graph model; only indicative here.
PUBLISHED_REFERENCE = {"f1": 0.937, "auc": 0.965, "recall": 0.991, "precision": 0.886, "fpr": 0.057}


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


def _digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, args, inputs: list[str], t0: float, config: ModelConfig | None = None):
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "subcommand": args.command if not getattr(args, "graph_command", None)
        else f"{args.command} {args.graph_command}",
        "flags": flags,
        "config": config.to_dict() if config else None,
        "seed": getattr(args, "seed", None),
        "inputs": {p: _digest(p) for p in inputs if p and Path(p).is_file()},
        "version": __version__,
        "timing": {"started": t0, "seconds": time.time() - t0},
    }
    target = out.with_name(out.name + ".manifest.json") if not out.is_dir() else out / "manifest.json"
    _dump_json(target, manifest)


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        raise StageError(name, exc) from exc


def _load_records(data: str, schema_path: str | None):
    """Table by default; CSV when a schema is given."""
    if schema_path:
        schema = FeatureSchema.load(schema_path)
        records, errors = parse_dataset(data, schema)
        for e in errors[:10]:
            log.warning("line %d: %s", e.line, e.message)
        if errors:
            log.warning("%d malformed rows skipped", len(errors))
        return records, schema
    return load_table(data)


def _resolve_config(args) -> ModelConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "threshold": getattr(args, "threshold", None),
        "window": getattr(args, "window", None),
        "weighted": getattr(args, "weighted", None),
        "similarity_attention": getattr(args, "similarity_attention", None),
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(cfg)


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _grid(s: str) -> list[float]:
    try:
        a, b, step = (float(x) for x in s.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("grid must look like start:stop:step") from None
    return [round(v, 10) for v in np.arange(a, b + step / 2, step)]


def _key(s: str) -> str:
    return {"addr": "address", "addr+port": "address+port",
            "address": "address", "address+port": "address+port"}[s]


# ------------------------------------------------------------ subcommands


def cmd_ingest(args) -> int:
    t0 = time.time()
    schema = _stage("ingest", FeatureSchema.load, args.schema)
    records, errors = _stage("ingest", parse_dataset, args.data, schema)
    for e in errors[:20]:
        print(f"line {e.line}: {e.message}", file=sys.stderr)
    n_in = len(records)
    if args.undersample_ratio and schema.label_column:
        records = _stage("ingest", undersample, records, args.undersample_ratio, args.seed)
    out = Path(args.out)
    save_table(out, records, schema)
    print(f"ingest: {n_in} rows parsed, {len(errors)} rejected, {len(records)} written to {out}")
    _write_manifest(out, args, [args.data, args.schema], t0)
    return 0


def cmd_synth(args) -> int:
    t0 = time.time()
    if args.script:
        script = _stage("synth", ScenarioScript.load, args.script)
        records, truth = _stage("synth", generate, script, args.seed)
    else:
        records, truth = _stage("synth", PRESETS[args.preset], args.seed)
    out = Path(args.out)
    write_csv(out, records, truth)
    default_schema().dump(out.with_name(out.stem + ".schema.json"))
    n_mal = int(truth.labels.sum())
    print(f"synth: {len(records)} flows ({n_mal} malicious) written to {out}")
    _write_manifest(out, args, [args.script] if args.script else [], t0)
    return 0


def _classic_json(cg) -> dict:
    return {
        "format": "flowgnn-classic/1",
        "nodes": [str(n) for n in cg.nodes],
        "edges": [[int(s), int(d)] for s, d in zip(cg.src, cg.dst)],
    }


def cmd_graph_build(args) -> int:
    t0 = time.time()
    records, schema = _stage("graph", _load_records, args.data, args.schema)
    key_mode = _key(args.key)
    prep = _stage("graph", Preprocessor.fit, records, schema)
    x = prep(records)
    out = Path(args.out)
    if args.mode == "classic":
        payload = _classic_json(build_classic_graph(records, x, key_mode))
    else:
        if args.mode == "flow":
            graphs = _stage("graph", build_window_graphs, records, x, args.window, key_mode)
        else:
            graphs = []
            for s in range(0, len(records), args.window):
                sl = slice(s, s + args.window)
                g = line_graph(build_classic_graph(records[sl], x[sl], key_mode))
                g.provenance = np.arange(s, s + g.n_nodes)
                graphs.append(g)
        if not args.weighted:
            for g in graphs:
                g.weights = np.ones(g.n_edges)
        payload = {"format": "flowgnn-windows/1", "mode": args.mode,
                   "windows": [g.to_json() for g in graphs],
                   "stats": [graph_stats(g) for g in graphs]}
        if args.binary:
            for k, g in enumerate(graphs):
                g.save_binary(f"{args.binary}.{k}")
    _dump_json(out, payload)
    print(f"graph: {args.mode} graph written to {out}")
    _write_manifest(out, args, [args.data], t0)
    return 0


def cmd_train(args) -> int:
    t0 = time.time()
    config = _stage("train", _resolve_config, args)
    records, schema = _stage("train", _load_records, args.data, args.schema)
    prep = _stage("train", Preprocessor.fit, records, schema)
    result = _stage("train", train, make_graphs(records, prep, config), config)
    out = Path(args.out)
    result.model.save(out, extra={"preprocessor": prep.to_dict()})
    curve = out.with_name(out.name + ".loss.csv")
    curve.write_text("epoch,loss\n" + "".join(f"{h['epoch']},{h['loss']!r}\n" for h in result.history))
    print(f"train: {len(result.history)} epochs, final loss {result.losses[-1]:.5f}, checkpoint {out}")
    _write_manifest(out, args, [args.data, args.config], t0, config)
    return 0


def _score(args):
    model, extra = _stage("classify", FlowGNN.load, args.ckpt)
    prep = Preprocessor.from_dict(extra["preprocessor"])
    records, _ = _stage("classify", _load_records, args.data, args.schema)
    graphs = make_graphs(records, prep, model.config)
    return model, records, graphs


def cmd_classify(args) -> int:
    t0 = time.time()
    model, records, graphs = _score(args)
    s = model.config.threshold if args.threshold is None else args.threshold
    scored = classify_graphs(graphs, model, s)
    out = Path(args.report)
    with open(out, "w") as fh:
        for f in scored:
            r = records[f.index]
            row = f.to_dict() | {"src_addr": r.src_addr, "src_port": r.src_port,
                                 "dst_addr": r.dst_addr, "dst_port": r.dst_port,
                                 "timestamp": r.timestamp}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"classify: {alert_count(scored)} alerts out of {len(scored)} flows (S={s})")
    if all(f.label is not None for f in scored):
        print(compute_metrics(scored).table())
    _write_manifest(out, args, [args.ckpt, args.data], t0, model.config)
    return 0


def cmd_sweep(args) -> int:
    t0 = time.time()
    model, _, graphs = _score(args)
    scored = classify_graphs(graphs, model, model.config.threshold)
    rows = _stage("sweep", threshold_sweep, scored, args.grid or list(DEFAULT_SWEEP))
    out = Path(args.out)
    out.write_text(sweep_csv(rows))
    print(f"sweep: {len(rows)} thresholds written to {out}")
    _write_manifest(out, args, [args.ckpt, args.data], t0, model.config)
    return 0


def _subsample(records, n, seed):
    if n is None or len(records) <= n:
        return records
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(records), size=n, replace=False))
    return [records[i] for i in keep]


def _write_experiment(out: Path, res, indicative: bool) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    report = res.report.to_dict() | {"summary": res.summary()}
    if indicative:
        report["published_reference"] = PUBLISHED_REFERENCE
        report["indicative_only"] = True
    _dump_json(out / "report.json", report)
    (out / "report.txt").write_text(res.report.table() + "\n")
    (out / "roc.csv").write_text(res.report.roc_csv())
    (out / "sweep.csv").write_text(sweep_csv(res.report.sweep))
    (out / "loss.csv").write_text(
        "epoch,loss\n" + "".join(f"{h['epoch']},{h['loss']!r}\n" for h in res.train_result.history))
    res.plan.save(out / "split.json")
    res.model.save(out / "model.ckpt", extra={"preprocessor": res.prep.to_dict()})
    return report


def cmd_evaluate(args) -> int:
    t0 = time.time()
    config = _stage("evaluate", _resolve_config, args)
    records, schema = _stage("evaluate", _load_records, args.data, args.schema)
    records = _subsample(records, args.subsample, config.seed)
    res = _stage("evaluate", run_experiment, records, schema, config, args.split,
                 fallback=args.fallback)
    out = Path(args.out)
    _write_experiment(out, res, indicative=True)
    print(res.report.table())
    print("note: published figures come from the full ToN IoT dataset; "
          "this comparison is indicative only")
    _write_manifest(out, args, [args.data, args.config, args.schema], t0, config)
    return 0


def cmd_compare_splits(args) -> int:
    t0 = time.time()
    config = _stage("compare-splits", _resolve_config, args)
    records, schema = _stage("compare-splits", _load_records, args.data, args.schema)
    out = Path(args.out)
    summary = {}
    for split in ("random", "ip"):
        res = _stage("compare-splits", run_experiment, records, schema, config, split,
                     fallback=args.fallback)
        _write_experiment(out / split, res, indicative=False)
        summary[split] = res.summary() | {
            "endpoint_overlap": len(res.plan.endpoint_overlap),
            "attack_type_overlap": sorted(res.plan.type_overlap)}
    summary["f1_gap"] = summary["random"]["f1"] - summary["ip"]["f1"]
    _dump_json(out / "compare.json", summary)
    lines = [f"{'metric':<10} {'random':>8} {'ip':>8}"]
    for k in ("f1", "precision", "recall", "fpr", "auc"):
        a, b = summary["random"][k], summary["ip"][k]
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        lines.append(f"{k:<10} {fmt(a):>8} {fmt(b):>8}")
    (out / "compare.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    _write_manifest(out, args, [args.data, args.config, args.schema], t0, config)
    return 0


def _measure(fn):
    tracemalloc.start()
    t = time.perf_counter()
    result = fn()
    secs = time.perf_counter() - t
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return result, secs, peak / 1e6


def cmd_bench(args) -> int:
    t0 = time.time()
    records, schema = _stage("bench", _load_records, args.data, args.schema)
    records = records[:args.window]
    prep = Preprocessor.fit(records, schema)
    x = prep(records)
    flow, tf, mf = _measure(lambda: build_flow_graph(records, x))
    classic, tc, mc = _measure(lambda: build_classic_graph(records, x))
    line, tl, ml = _measure(lambda: line_graph(build_classic_graph(records, x)))
    rows = {
        "flow": {"seconds": tf, "peak_mb": mf, "nodes": flow.n_nodes, "edges": flow.n_edges},
        "classic": {"seconds": tc, "peak_mb": mc, "nodes": classic.n_nodes, "edges": classic.n_edges},
        "classic+line": {"seconds": tl, "peak_mb": ml, "nodes": line.n_nodes, "edges": line.n_edges},
    }
    out = Path(args.out)
    _dump_json(out, {"n_flows": len(records), "results": rows})
    for k, r in rows.items():
        print(f"{k:<13} {r['seconds'] * 1e3:9.2f} ms {r['peak_mb']:8.2f} MB "
              f"{r['nodes']:7d} nodes {r['edges']:9d} edges")
    _write_manifest(out, args, [args.data], t0)
    return 0


# ------------------------------------------------------------------ parser


def _model_flags(p):
    p.add_argument("--config", help="YAML/JSON model config (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--weighted", type=_bool)
    p.add_argument("--similarity-attention", dest="similarity_attention", type=_bool)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowgnn", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"flowgnn {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a flow CSV into a binary table")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--undersample-ratio", type=float, default=4.0,
                   help="max normal:malicious ratio (0 disables)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("graph", help="graph construction")
    gsub = p.add_subparsers(dest="graph_command", required=True)
    g = gsub.add_parser("build", help="build flow / classic / line graphs")
    g.add_argument("--data", required=True)
    g.add_argument("--schema", help="read --data as CSV with this schema")
    g.add_argument("--mode", choices=("flow", "classic", "line"), default="flow")
    g.add_argument("--window", type=int, default=1024)
    g.add_argument("--key", choices=("addr", "addr+port"), default="addr")
    g.add_argument("--weighted", type=_bool, default=True)
    g.add_argument("--binary", help="also write binary adjacency files with this prefix")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_graph_build)

    p = sub.add_parser("synth", help="generate a labelled synthetic flow CSV")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--script", help="YAML/JSON scenario script")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on every flow of a table")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    _model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="score flows with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--threshold", type=float)
    p.add_argument("--report", required=True, help="JSON-lines output, one flow per line")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="split, train, and report test metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    _model_flags(p)
    p.add_argument("--split", choices=("ip", "random"), default="ip")
    p.add_argument("--subsample", type=int, default=100_000,
                   help="cap on flows used (seeded subsample)")
    p.add_argument("--fallback", action="store_true",
                   help="allow an endpoint-only split when attack types are too few")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="threshold sensitivity table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--grid", type=_grid, help="start:stop:step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare-splits", help="random vs endpoint-disjoint evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    _model_flags(p)
    p.add_argument("--fallback", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_splits)

    p = sub.add_parser("bench", help="graph build time and memory, flow vs classic vs line")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--window", type=int, default=1024)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"flowgnn: stage {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
