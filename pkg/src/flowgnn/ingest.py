"""Flow-record ingestion and preprocessing.

CSV rows become :class:`FlowRecord` objects; numeric columns are standardized
with statistics taken from the training partition only, categorical columns
are one-hot encoded against a vocabulary frozen at fit time (with one extra
"unknown" slot per column), and the normal class can be undersampled.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import yaml

from . import blob

NORMAL = 0
MALICIOUS = 1

STD_FLOOR = 1e-8
ENDPOINT_FIELDS = ("src_addr", "src_port", "dst_addr", "dst_port", "timestamp")
DEFAULT_NORMAL_LABELS = ("0", "normal", "benign")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FlowRecord:
    src_addr: str
    src_port: int
    dst_addr: str
    dst_port: int
    timestamp: float
    features: tuple[float, ...]
    categorical: dict[str, str] = field(default_factory=dict)
    label: int | None = None
    attack_type: str | None = None

    def __post_init__(self):
        for p in (self.src_port, self.dst_port):
            if not 0 <= p <= 65535:
                raise ValueError(f"port {p} outside [0, 65535]")
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        if self.label not in (None, NORMAL, MALICIOUS):
            raise ValueError(f"label must be None, {NORMAL} or {MALICIOUS}, got {self.label!r}")


@dataclass
class FeatureSchema:
    numeric_columns: list[str]
    categorical_columns: list[str] = field(default_factory=list)
    label_column: str | None = None
    attack_type_column: str | None = None
    normal_labels: list[str] = field(default_factory=lambda: list(DEFAULT_NORMAL_LABELS))
    endpoint_columns: dict[str, str] = field(
        default_factory=lambda: {k: k for k in ENDPOINT_FIELDS})
    vocabularies: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        missing = [k for k in ENDPOINT_FIELDS if k not in self.endpoint_columns]
        if missing:
            raise SchemaError(f"endpoint_columns is missing {missing}")

    @property
    def required_columns(self) -> list[str]:
        cols = [self.endpoint_columns[k] for k in ENDPOINT_FIELDS]
        cols += self.numeric_columns + self.categorical_columns
        if self.label_column:
            cols.append(self.label_column)
        if self.attack_type_column:
            cols.append(self.attack_type_column)
        return cols

    @property
    def is_fitted(self) -> bool:
        return all(c in self.vocabularies for c in self.categorical_columns)

    @property
    def n_features(self) -> int:
        if not self.is_fitted:
            raise SchemaError("categorical vocabularies have not been fitted")
        return len(self.numeric_columns) + sum(
            len(self.vocabularies[c]) + 1 for c in self.categorical_columns)

    def is_normal(self, token: str) -> bool:
        t = token.strip().lower()
        return t in {s.lower() for s in self.normal_labels}

    def fit_vocabularies(self, records: Sequence[FlowRecord]) -> "FeatureSchema":
        """Return a copy whose vocabularies are the sorted distinct tokens seen in ``records``."""
        vocab = {c: sorted({r.categorical[c] for r in records}) for c in self.categorical_columns}
        return replace(self, vocabularies=vocab)

    def to_dict(self) -> dict:
        return {
            "numeric_columns": list(self.numeric_columns),
            "categorical_columns": list(self.categorical_columns),
            "label_column": self.label_column,
            "attack_type_column": self.attack_type_column,
            "normal_labels": list(self.normal_labels),
            "endpoint_columns": dict(self.endpoint_columns),
            "vocabularies": {k: list(v) for k, v in self.vocabularies.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        known = {"numeric_columns", "categorical_columns", "label_column", "attack_type_column",
                 "normal_labels", "endpoint_columns", "vocabularies"}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        if "numeric_columns" not in d:
            raise SchemaError("schema needs numeric_columns")
        d = dict(d)
        if "endpoint_columns" in d:
            d["endpoint_columns"] = {**{k: k for k in ENDPOINT_FIELDS}, **d["endpoint_columns"]}
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(load_config(path))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path: str | Path) -> dict:
    """Read a YAML or JSON config file into a dict."""
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        return yaml.safe_load(text) or {}
    return json.loads(text)


class RowError(NamedTuple):
    line: int
    message: str


class ParseResult(NamedTuple):
    records: list[FlowRecord]
    errors: list[RowError]


def _parse_port(tok: str) -> int:
    v = float(tok)
    if not v.is_integer():
        raise ValueError(f"port {tok!r} is not an integer")
    v = int(v)
    if not 0 <= v <= 65535:
        raise ValueError(f"port {v} outside [0, 65535]")
    return v


def _parse_float(tok: str, col: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ValueError(f"non-numeric value {tok!r} in column {col!r}") from None
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {tok!r} in column {col!r}")
    return v


def parse_dataset(path: str | Path, schema: FeatureSchema) -> ParseResult:
    """Parse a flow CSV into records, skipping (and reporting) malformed rows.

    Row order is preserved. Line numbers in the error list are 1-based file
    lines, so the header is line 1 and the first data row is line 2.
    """
    ep = schema.endpoint_columns
    records: list[FlowRecord] = []
    errors: list[RowError] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in schema.required_columns:
            if col not in header:
                raise SchemaError(f"column {col!r} missing from {path}")
        for row in reader:
            line = reader.line_num
            try:
                feats = tuple(_parse_float(row[c], c) for c in schema.numeric_columns)
                label = None
                if schema.label_column:
                    label = NORMAL if schema.is_normal(row[schema.label_column]) else MALICIOUS
                atype = None
                if schema.attack_type_column:
                    atype = row[schema.attack_type_column].strip() or None
                rec = FlowRecord(
                    src_addr=row[ep["src_addr"]].strip(),
                    src_port=_parse_port(row[ep["src_port"]]),
                    dst_addr=row[ep["dst_addr"]].strip(),
                    dst_port=_parse_port(row[ep["dst_port"]]),
                    timestamp=_parse_float(row[ep["timestamp"]], ep["timestamp"]),
                    features=feats,
                    categorical={c: row[c].strip() for c in schema.categorical_columns},
                    label=label,
                    attack_type=atype,
                )
            except (ValueError, TypeError, AttributeError) as exc:
                errors.append(RowError(line, str(exc)))
                continue
            records.append(rec)
    return ParseResult(records, errors)


@dataclass(frozen=True, eq=False)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Scaler):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def numeric_matrix(records: Sequence[FlowRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, 0))
    n_f = len(records[0].features)
    if any(len(r.features) != n_f for r in records):
        raise ValueError("records disagree on the number of numeric features")
    return np.asarray([r.features for r in records], dtype=float).reshape(len(records), n_f)


def fit_scaler(train_records: Sequence[FlowRecord]) -> Scaler:
    """Per-column mean and population std over the training rows.

    Columns whose std falls under ``STD_FLOOR`` get std 1, so they come out
    centered at zero instead of blowing up.
    """
    if len(train_records) < 2:
        raise ValueError(f"fit_scaler needs at least 2 records, got {len(train_records)}")
    x = numeric_matrix(train_records)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return Scaler(mean, std)


def transform(records: Sequence[FlowRecord], scaler: Scaler, schema: FeatureSchema) -> np.ndarray:
    """Standardized numeric block followed by one one-hot group per categorical column.

    Each group has ``len(vocab) + 1`` slots; the last one catches tokens that
    were not seen at fit time.
    """
    if not schema.is_fitted:
        raise SchemaError("schema vocabularies must be fitted before transform")
    n = len(records)
    num = scaler.apply(numeric_matrix(records)) if n else np.zeros((0, len(schema.numeric_columns)))
    blocks = [num]
    for col in schema.categorical_columns:
        vocab = schema.vocabularies[col]
        index = {tok: i for i, tok in enumerate(vocab)}
        onehot = np.zeros((n, len(vocab) + 1))
        slots = [index.get(r.categorical[col], len(vocab)) for r in records]
        onehot[np.arange(n), slots] = 1.0
        blocks.append(onehot)
    return np.hstack(blocks)


def undersample(records: Sequence[FlowRecord], target_ratio: float = 4.0, seed: int = 0) -> list[FlowRecord]:
    """Randomly drop normal records until normal/malicious <= ``target_ratio``.

    Malicious records are always kept and the survivors keep their input order.
    """
    if target_ratio < 1:
        raise ValueError("target_ratio must be >= 1")
    if any(r.label is None for r in records):
        raise ValueError("undersample needs labelled records")
    mal = [i for i, r in enumerate(records) if r.label == MALICIOUS]
    nor = [i for i, r in enumerate(records) if r.label == NORMAL]
    if not mal:
        raise ValueError("no malicious records: normal/malicious ratio is undefined")
    keep_normal = int(math.floor(target_ratio * len(mal)))
    if len(nor) <= keep_normal:
        return list(records)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(nor), size=keep_normal, replace=False)
    keep = set(mal) | {nor[i] for i in chosen}
    return [r for i, r in enumerate(records) if i in keep]


def labels_of(records: Sequence[FlowRecord]) -> np.ndarray:
    return np.asarray([-1 if r.label is None else r.label for r in records], dtype=np.int64)


def save_table(path: str | Path, records: Sequence[FlowRecord], schema: FeatureSchema) -> None:
    """Write records (raw, unscaled) plus the schema to a binary table."""
    meta = {
        "schema": schema.to_dict(),
        "src_addr": [r.src_addr for r in records],
        "dst_addr": [r.dst_addr for r in records],
        "categorical": {c: [r.categorical[c] for r in records] for c in schema.categorical_columns},
        "attack_type": [r.attack_type for r in records],
    }
    n_f = len(schema.numeric_columns)
    arrays = {
        "features": numeric_matrix(records) if records else np.zeros((0, n_f)),
        "ports": np.asarray([[r.src_port, r.dst_port] for r in records], dtype=np.int64).reshape(-1, 2),
        "timestamp": np.asarray([r.timestamp for r in records], dtype=float),
        "label": labels_of(records),
    }
    blob.save(path, "flow-table", meta, arrays)


def load_table(path: str | Path) -> tuple[list[FlowRecord], FeatureSchema]:
    meta, a = blob.load(path, "flow-table")
    schema = FeatureSchema.from_dict(meta["schema"])
    cats = meta["categorical"]
    records = []
    for i in range(len(a["label"])):
        lab = int(a["label"][i])
        records.append(FlowRecord(
            src_addr=meta["src_addr"][i],
            src_port=int(a["ports"][i, 0]),
            dst_addr=meta["dst_addr"][i],
            dst_port=int(a["ports"][i, 1]),
            timestamp=float(a["timestamp"][i]),
            features=tuple(float(v) for v in a["features"][i]),
            categorical={c: cats[c][i] for c in schema.categorical_columns},
            label=None if lab < 0 else lab,
            attack_type=meta["attack_type"][i],
        ))
    return records, schema
