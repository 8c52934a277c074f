from flowgnn.ingest import MALICIOUS, NORMAL, FlowRecord


def random_records(rng, n, n_endpoints, n_features=3, ports=3, labelled=True):
    """Flows between random endpoints ``h0..h{k-1}`` with random features."""
    out = []
    for i in range(n):
        s, d = rng.integers(n_endpoints, size=2)
        label = (MALICIOUS if rng.random() < 0.3 else NORMAL) if labelled else None
        out.append(FlowRecord(f"h{s}", int(rng.integers(ports)), f"h{d}", int(rng.integers(ports)),
                              float(i), tuple(rng.normal(size=n_features)), {}, label))
    return out


def flow(src, dst, features=(1.0, 0.0), label=NORMAL, ts=0.0, sport=1000, dport=80):
    return FlowRecord(src, sport, dst, dport, ts, tuple(features), {}, label)
