"""Graph build time and peak memory as the window grows: flow graph vs classic + line graph."""

import argparse
import time
import tracemalloc

import numpy as np

from flowgnn.graph import build_classic_graph, build_flow_graph, line_graph
from flowgnn.synth import campaign_script, generate


def measure(fn):
    tracemalloc.start()
    t = time.perf_counter()
    out = fn()
    secs = time.perf_counter() - t
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return out, secs, peak / 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--windows", type=int, nargs="+", default=[256, 512, 1024, 2048])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    recs, _ = generate(campaign_script(n_campaigns=6, benign=6000, seed=args.seed), args.seed)
    x = np.asarray([r.features for r in recs])
    print(f"{'window':>6} {'builder':<13} {'ms':>9} {'MB':>7} {'edges':>9}")
    for w in args.windows:
        r, f = recs[:w], x[:w]
        for name, fn in (("flow", lambda: build_flow_graph(r, f)),
                         ("classic", lambda: build_classic_graph(r, f)),
                         ("classic+line", lambda: line_graph(build_classic_graph(r, f)))):
            g, secs, mb = measure(fn)
            edges = g.n_edges if hasattr(g, "n_edges") else len(g.src)
            print(f"{w:>6} {name:<13} {secs * 1e3:9.2f} {mb:7.2f} {edges:>9}")


if __name__ == "__main__":
    main()
