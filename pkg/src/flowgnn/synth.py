"""Labelled synthetic flow datasets built from declarative scenario scripts.

A script is a list of attack steps (actor, victims, flow count, feature
template, attack type, campaign) plus optional benign background traffic.
Within a step all flows scatter around one step centre, so repeated attack
traffic is mutually similar. Malicious template means are scaled by
``separation``; benign templates are used as written.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import MALICIOUS, NORMAL, FeatureSchema, FlowRecord, load_config

FEATURE_NAMES = ("duration", "src_bytes", "dst_bytes", "src_pkts",
                 "dst_pkts", "missed_bytes", "src_ip_bytes", "dst_ip_bytes")
N_FEATURES = len(FEATURE_NAMES)


@dataclass
class FeatureTemplate:
    mean: list[float]
    noise: float = 0.3
    jitter: float = 0.2
    proto: str = "tcp"
    service: str = "-"


@dataclass
class Step:
    time: float
    actor: str
    victims: list[str]
    flows: int
    template: str
    attack_type: str
    campaign: str
    label: int = MALICIOUS
    spoof: bool = False
    pre_spoof_actor: str | None = None
    dst_port: int = 80
    duration: float = 10.0


@dataclass
class Background:
    count: int
    clients: list[str]
    servers: list[str]
    templates: list[str]
    span: tuple[float, float] = (0.0, 1000.0)
    server_skew: float = 1.0


@dataclass
class ScenarioScript:
    steps: list[Step]
    templates: dict[str, FeatureTemplate]
    background: Background | None = None
    separation: float = 1.0

    def validate(self) -> None:
        if not self.steps and (self.background is None or self.background.count == 0):
            raise ValueError("empty scenario script")
        times = [s.time for s in self.steps]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("step times must be non-decreasing")
        for s in self.steps:
            if s.template not in self.templates:
                raise ValueError(f"step uses unknown template {s.template!r}")
            if s.spoof and s.pre_spoof_actor is None:
                raise ValueError("spoofed steps must name the pre-spoof actor")
        if self.background:
            for t in self.background.templates:
                if t not in self.templates:
                    raise ValueError(f"background uses unknown template {t!r}")
            attackers = {s.actor for s in self.steps} | {s.pre_spoof_actor for s in self.steps}
            reused = attackers & set(self.background.clients + self.background.servers)
            if reused:
                raise ValueError(f"background endpoints reuse attacker addresses {sorted(reused)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioScript":
        templates = {k: FeatureTemplate(**v) for k, v in d["templates"].items()}
        steps = []
        for s in d.get("steps", []):
            s = dict(s)
            if isinstance(s.get("label"), str):
                s["label"] = NORMAL if s["label"].lower() == "normal" else MALICIOUS
            steps.append(Step(**s))
        bg = d.get("background")
        if bg is not None:
            bg = dict(bg)
            if "span" in bg:
                bg["span"] = tuple(bg["span"])
            bg = Background(**bg)
        return cls(steps, templates, bg, d.get("separation", 1.0))

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioScript":
        return cls.from_dict(load_config(path))


@dataclass
class GroundTruth:
    labels: np.ndarray
    attack_types: list[str | None]
    campaigns: list[str | None]
    steps: np.ndarray
    spoofed: np.ndarray

    def campaign_indices(self, campaign: str) -> np.ndarray:
        return np.flatnonzero(np.asarray([c == campaign for c in self.campaigns]))


def _port(rng) -> int:
    return int(rng.integers(1024, 65536))


def generate(script: ScenarioScript, seed: int = 0) -> tuple[list[FlowRecord], GroundTruth]:
    """Draw the flows of ``script``; output is sorted by timestamp and fully seeded."""
    script.validate()
    rng = np.random.default_rng(seed)
    rows = []  # (timestamp, seq, record, label, type, campaign, step, spoof)

    def draw(tname: str, n: int, malicious: bool):
        t = script.templates[tname]
        mean = np.asarray(t.mean, dtype=float)
        if len(mean) != N_FEATURES:
            raise ValueError(f"template {tname!r} has {len(mean)} features, expected {N_FEATURES}")
        if malicious:
            mean = mean * script.separation
        centre = mean + rng.normal(0.0, t.jitter, N_FEATURES)
        return centre + rng.normal(0.0, t.noise, (n, N_FEATURES)), t

    for k, step in enumerate(script.steps):
        x, t = draw(step.template, step.flows, step.label == MALICIOUS)
        for f in range(step.flows):
            victim = step.victims[f % len(step.victims)]
            ts = step.time + step.duration * f / max(step.flows, 1)
            rec = FlowRecord(step.actor, _port(rng), victim, step.dst_port, float(ts),
                             tuple(float(v) for v in x[f]),
                             {"proto": t.proto, "service": t.service},
                             step.label, step.attack_type if step.label == MALICIOUS else None)
            rows.append((rec.timestamp, len(rows), rec, step.attack_type, step.campaign, k, step.spoof))

    bg = script.background
    if bg is not None and bg.count:
        w = 1.0 / np.arange(1, len(bg.servers) + 1) ** bg.server_skew
        w /= w.sum()
        server_tpl = {s: bg.templates[i % len(bg.templates)] for i, s in enumerate(bg.servers)}
        for _ in range(bg.count):
            server = bg.servers[rng.choice(len(bg.servers), p=w)]
            client = bg.clients[rng.integers(len(bg.clients))]
            tname = server_tpl[server]
            t = script.templates[tname]
            x = np.asarray(t.mean) + rng.normal(0.0, t.noise + t.jitter, N_FEATURES)
            ts = rng.uniform(*bg.span)
            rec = FlowRecord(client, _port(rng), server, 443 if t.service == "ssl" else 80,
                             float(ts), tuple(float(v) for v in x),
                             {"proto": t.proto, "service": t.service}, NORMAL, None)
            rows.append((rec.timestamp, len(rows), rec, None, None, -1, False))

    rows.sort(key=lambda r: (r[0], r[1]))
    records = [r[2] for r in rows]
    truth = GroundTruth(
        labels=np.asarray([r.label for r in records], dtype=np.int64),
        attack_types=[r[3] if r[2].label == MALICIOUS else None for r in rows],
        campaigns=[r[4] for r in rows],
        steps=np.asarray([r[5] for r in rows], dtype=np.int64),
        spoofed=np.asarray([r[6] for r in rows], dtype=bool),
    )
    return records, truth


# ------------------------------------------------------------- templates


def _unit(rng, scale=1.0):
    v = rng.normal(size=N_FEATURES)
    return v / np.linalg.norm(v) * scale


def _benign_templates() -> dict[str, FeatureTemplate]:
    return {
        "web": FeatureTemplate([0.2, 0.5, 1.0, 0.3, 0.6, 0.0, 0.5, 1.0], 0.5, 0.3, "tcp", "http"),
        "dns": FeatureTemplate([-0.6, -0.8, -0.6, -0.7, -0.7, 0.0, -0.8, -0.6], 0.5, 0.3, "udp", "dns"),
        "tls": FeatureTemplate([0.8, 0.2, 0.6, 0.5, 0.4, 0.1, 0.2, 0.6], 0.5, 0.3, "tcp", "ssl"),
    }


def fig5_script() -> ScenarioScript:
    """Four-step campaign: reconnaissance, SQL injection, password cracking, spoofed retry.

    One attacker (``203.0.113.10``) probes four hosts, injects into the first,
    brute-forces the fourth, then repeats the brute force from a spoofed
    address (``198.51.100.77``). A small benign background uses its own hosts.
    """
    attacker, spoofed = "203.0.113.10", "198.51.100.77"
    victims = [f"10.0.0.{i}" for i in range(1, 5)]
    templates = {
        "recon": FeatureTemplate([-1.5, -1.2, -1.4, -1.0, -1.3, 0.0, -1.2, -1.4], 0.2, 0.1, "tcp", "-"),
        "sqli": FeatureTemplate([0.5, 1.8, 0.3, 0.9, 0.2, 0.0, 1.8, 0.3], 0.2, 0.1, "tcp", "http"),
        "crack": FeatureTemplate([-0.4, 0.3, -0.6, 1.2, 1.1, 0.0, 0.3, -0.6], 0.2, 0.1, "tcp", "ssh"),
        **_benign_templates(),
    }
    steps = [
        Step(100.0, attacker, victims, 4, "recon", "scanning", "campaign-0", dst_port=0),
        Step(200.0, attacker, victims[:1], 3, "sqli", "injection", "campaign-0", dst_port=3306),
        Step(300.0, attacker, victims[3:], 5, "crack", "password", "campaign-0", dst_port=22),
        Step(400.0, spoofed, victims[3:], 5, "crack", "password", "campaign-0", spoof=True,
             pre_spoof_actor=attacker, dst_port=22),
    ]
    bg = Background(40, [f"10.1.0.{i}" for i in range(10, 20)], ["10.1.1.1", "10.1.1.2"],
                    ["web", "dns"], (0.0, 500.0))
    return ScenarioScript(steps, templates, bg, separation=1.0)


ATTACK_TYPES = ("scanning", "password", "injection", "xss", "dos", "ddos",
                "backdoor", "ransomware", "mitm", "sqli", "bruteforce", "exfiltration",
                "c2", "spam", "worm", "phishing")


def campaign_script(n_campaigns: int = 6, malicious_per_campaign: int = 180,
                    benign: int = 1500, separation: float = 2.0, type_spread: float = 0.1,
                    seed: int = 0) -> ScenarioScript:
    """Several multi-step spoofing campaigns like the fig5 preset, over a shared benign network.

    Campaign ``c`` uses its own attacker, attack types ``ATTACK_TYPES[2c]`` and
    ``ATTACK_TYPES[2c+1]`` (so type sets are disjoint across campaigns), and
    ends with a spoofed retry. Victims are ordinary benign hosts. All attack
    templates share a common offset from benign traffic plus a per-type
    direction; ``separation`` scales the attack means.
    """
    if 2 * n_campaigns > len(ATTACK_TYPES):
        raise ValueError(f"at most {len(ATTACK_TYPES) // 2} campaigns")
    rng = np.random.default_rng(seed)
    templates = _benign_templates()
    common = _unit(rng)
    services = [("tcp", "http"), ("udp", "dns"), ("tcp", "ssl")]
    for t in ATTACK_TYPES[:2 * n_campaigns]:
        mean = common + _unit(rng, type_spread)
        proto, service = services[int(rng.integers(len(services)))]
        templates[t] = FeatureTemplate(mean.tolist(), 0.5, 0.3, proto, service)
    servers = [f"10.2.0.{i}" for i in range(1, 25)]
    clients = [f"10.3.{i // 250}.{i % 250 + 1}" for i in range(80)]
    span = 10_000.0
    steps = []
    n_probe = malicious_per_campaign // 3
    n_exploit = malicious_per_campaign // 3
    n_spoof = malicious_per_campaign - n_probe - n_exploit
    for c in range(n_campaigns):
        attacker = f"172.16.{c}.66"
        spoofed = f"198.51.{c}.99"
        probe_t, exploit_t = ATTACK_TYPES[2 * c], ATTACK_TYPES[2 * c + 1]
        pool = servers + clients
        victims = [pool[i] for i in rng.choice(len(pool), size=4, replace=False)]
        t0 = span * c / n_campaigns + float(rng.uniform(0, span / (2 * n_campaigns)))
        camp = f"campaign-{c}"
        steps += [
            Step(t0, attacker, victims, n_probe, probe_t, probe_t, camp, duration=200.0),
            Step(t0 + 300, attacker, victims[:2], n_exploit, exploit_t, exploit_t, camp,
                 duration=200.0),
            Step(t0 + 600, spoofed, victims[:2], n_spoof, exploit_t, exploit_t, camp, spoof=True,
                 pre_spoof_actor=attacker, duration=200.0),
        ]
    steps.sort(key=lambda s: s.time)
    bg = Background(benign, clients, servers, ["web", "dns", "tls"], (0.0, span), 0.5)
    return ScenarioScript(steps, templates, bg, separation)


def leakage_corpus(n_attackers: int = 10, n_clients: int = 20, n_servers: int = 6,
                   flows_per_endpoint: int = 40, spread: float = 2.0, noise: float = 0.05,
                   seed: int = 0) -> tuple[list[FlowRecord], GroundTruth]:
    """Flows that are near-duplicates per source endpoint, labels unrelated to features.

    Every source endpoint (attacker or benign client) gets its own random
    feature centre drawn from the same distribution, so a classifier can only
    succeed by recognising endpoints it has already seen.
    """
    rng = np.random.default_rng(seed)
    servers = [f"10.9.0.{i}" for i in range(1, n_servers + 1)]
    rows = []
    sources = [(f"172.20.0.{i + 1}", MALICIOUS, ATTACK_TYPES[i % len(ATTACK_TYPES)] + f"-{i}")
               for i in range(n_attackers)]
    sources += [(f"10.8.0.{i + 1}", NORMAL, None) for i in range(n_clients)]
    for k, (addr, label, atype) in enumerate(sources):
        centre = rng.normal(0.0, spread, N_FEATURES)
        victim = f"10.7.0.{k + 1}" if label == MALICIOUS else None
        for f in range(flows_per_endpoint):
            dst = victim or servers[int(rng.integers(n_servers))]
            x = centre + rng.normal(0.0, noise, N_FEATURES)
            ts = float(rng.uniform(0, 1000))
            rec = FlowRecord(addr, _port(rng), dst, 80, ts, tuple(float(v) for v in x),
                             {"proto": "tcp", "service": "-"}, label, atype)
            rows.append((ts, len(rows), rec, addr if label == MALICIOUS else None))
    rows.sort(key=lambda r: (r[0], r[1]))
    records = [r[2] for r in rows]
    truth = GroundTruth(np.asarray([r.label for r in records], dtype=np.int64),
                        [r.attack_type for r in records], [r[3] for r in rows],
                        np.full(len(records), -1, dtype=np.int64), np.zeros(len(records), bool))
    return records, truth


# ------------------------------------------------------------------- csv

CSV_COLUMNS = ["src_ip", "src_port", "dst_ip", "dst_port", "ts", *FEATURE_NAMES,
               "proto", "service", "label", "type", "campaign"]


def default_schema() -> FeatureSchema:
    """Schema describing the CSV files written by :func:`write_csv`."""
    return FeatureSchema(
        numeric_columns=list(FEATURE_NAMES),
        categorical_columns=["proto", "service"],
        label_column="label",
        attack_type_column="type",
        normal_labels=["0", "normal"],
        endpoint_columns={"src_addr": "src_ip", "src_port": "src_port", "dst_addr": "dst_ip",
                          "dst_port": "dst_port", "timestamp": "ts"},
    )


def write_csv(path: str | Path, records: Sequence[FlowRecord], truth: GroundTruth | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for k, r in enumerate(records):
            camp = truth.campaigns[k] if truth is not None else None
            w.writerow([r.src_addr, r.src_port, r.dst_addr, r.dst_port, repr(r.timestamp),
                        *(repr(v) for v in r.features),
                        r.categorical.get("proto", "-"), r.categorical.get("service", "-"),
                        int(r.label or 0), r.attack_type or "", camp or ""])


PRESETS = {
    "fig5": lambda seed: generate(fig5_script(), seed),
    "campaigns": lambda seed: generate(campaign_script(seed=seed), seed),
    "leakage": lambda seed: leakage_corpus(seed=seed),
}
