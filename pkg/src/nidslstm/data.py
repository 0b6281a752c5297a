"""UNSW-NB15 ingestion, vocabularies, normalization and sliding windows."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CLASS_NAMES = (
    "Normal",
    "Analysis",
    "Backdoor",
    "DoS",
    "Exploits",
    "Fuzzers",
    "Generic",
    "Reconnaissance",
    "Shellcode",
    "Worms",
)
NUM_CLASSES = len(CLASS_NAMES)

_CLASS_ALIASES = {name.lower(): i for i, name in enumerate(CLASS_NAMES)}
_CLASS_ALIASES.update({"": 0, "backdoors": 2})

# Feature columns of UNSW_NB15_training-set.csv, in file order (between id and attack_cat).
UNSW_FEATURES = (
    "dur", "proto", "service", "state", "spkts", "dpkts", "sbytes", "dbytes",
    "rate", "sttl", "dttl", "sload", "dload", "sloss", "dloss", "sinpkt",
    "dinpkt", "sjit", "djit", "swin", "stcpb", "dtcpb", "dwin", "tcprtt",
    "synack", "ackdat", "smean", "dmean", "trans_depth", "response_body_len",
    "ct_srv_src", "ct_state_ttl", "ct_dst_ltm", "ct_src_dport_ltm",
    "ct_dst_sport_ltm", "ct_dst_src_ltm", "is_ftp_login", "ct_ftp_cmd",
    "ct_flw_http_mthd", "ct_src_ltm", "ct_srv_dst", "is_sm_ips_ports",
)


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[str, ...]
    categorical: tuple[str, ...]
    binary: tuple[str, ...]
    multi_label: str = "attack_cat"
    binary_label: str = "label"
    id_column: str = "id"

    @property
    def continuous(self) -> tuple[str, ...]:
        return tuple(f for f in self.features if f not in self.categorical)

    @property
    def binary_mask(self) -> np.ndarray:
        return np.array([f in self.binary for f in self.continuous], dtype=bool)

    def schema_hash(self) -> str:
        payload = json.dumps(
            {
                "features": self.features,
                "categorical": self.categorical,
                "binary": self.binary,
                "labels": [self.multi_label, self.binary_label],
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


UNSW_SCHEMA = FeatureSchema(
    features=UNSW_FEATURES,
    categorical=("proto", "service", "state"),
    binary=("is_ftp_login", "is_sm_ips_ports"),
)


def class_id(name: str) -> int:
    try:
        return _CLASS_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown attack category {name!r}") from None


@dataclass(frozen=True)
class FlowRecord:
    continuous: np.ndarray
    cats: tuple[int, ...]
    multi_label: int
    binary_label: int


@dataclass
class RecordTable:
    """Raw records as loaded from CSV: categorical columns still hold strings."""

    schema: FeatureSchema
    continuous: np.ndarray  # (N, C)
    categorical: dict[str, np.ndarray]  # name -> (N,) str
    multi: np.ndarray
    binary: np.ndarray

    def __len__(self) -> int:
        return len(self.multi)

    def class_counts(self) -> dict[str, int]:
        return class_counts(self.multi)


@dataclass
class RecordSet:
    """Encoded records: categorical values replaced by vocabulary indices."""

    schema_hash: str
    continuous: np.ndarray  # (N, C) float64
    cats: np.ndarray  # (N, n_cat) int64
    multi: np.ndarray  # (N,) int64
    binary: np.ndarray  # (N,) int64
    unknown_counts: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.multi)

    def __getitem__(self, i: int) -> FlowRecord:
        return FlowRecord(
            continuous=self.continuous[i].copy(),
            cats=tuple(int(c) for c in self.cats[i]),
            multi_label=int(self.multi[i]),
            binary_label=int(self.binary[i]),
        )

    def slice(self, start: int, stop: int) -> "RecordSet":
        return replace(
            self,
            continuous=self.continuous[start:stop],
            cats=self.cats[start:stop],
            multi=self.multi[start:stop],
            binary=self.binary[start:stop],
        )

    def class_counts(self) -> dict[str, int]:
        return class_counts(self.multi)


def class_counts(multi: np.ndarray) -> dict[str, int]:
    counts = np.bincount(np.asarray(multi, dtype=np.int64), minlength=NUM_CLASSES)
    return {name: int(counts[i]) for i, name in enumerate(CLASS_NAMES)}


def _parse_numeric(column: list[str], name: str) -> np.ndarray:
    try:
        return np.asarray(column, dtype=np.float64)
    except ValueError:
        for row, value in enumerate(column, start=1):
            try:
                float(value)
            except ValueError:
                raise ValueError(
                    f"row {row}: cannot parse {value!r} in numeric column {name!r}"
                ) from None
        raise


def load_csv(path: str | Path, schema: FeatureSchema = UNSW_SCHEMA) -> RecordTable:
    """Read a UNSW-NB15 partition file. File order is kept as chronological order."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        index = {name: i for i, name in enumerate(header)}
        needed = list(schema.features) + [schema.multi_label, schema.binary_label]
        for name in needed:
            if name not in index:
                raise ValueError(f"{path}: missing column {name!r}")
        columns: dict[str, list[str]] = {name: [] for name in needed}
        picks = [(name, index[name]) for name in needed]
        width = len(header)
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(f"{path}: row {row_no} has {len(row)} fields, expected {width}")
            for name, i in picks:
                columns[name].append(row[i])

    continuous = np.column_stack(
        [_parse_numeric(columns[name], name) for name in schema.continuous]
    ) if columns[schema.features[0]] else np.zeros((0, len(schema.continuous)))
    categorical = {
        name: np.array([v.strip() for v in columns[name]], dtype=object)
        for name in schema.categorical
    }
    multi = np.empty(len(columns[schema.multi_label]), dtype=np.int64)
    for row_no, value in enumerate(columns[schema.multi_label], start=1):
        try:
            multi[row_no - 1] = class_id(value)
        except ValueError as exc:
            raise ValueError(f"{path}: row {row_no}: {exc}") from None
    binary = _parse_numeric(columns[schema.binary_label], schema.binary_label).astype(np.int64)
    bad = np.flatnonzero(binary != (multi != 0))
    if bad.size:
        raise ValueError(
            f"{path}: row {bad[0] + 1}: label {binary[bad[0]]} disagrees with "
            f"attack category {CLASS_NAMES[multi[bad[0]]]}"
        )
    return RecordTable(schema, continuous, categorical, multi, binary)


def write_csv(path: str | Path, table: RecordTable) -> None:
    """Write records back out in the UNSW-NB15 partition layout."""
    schema = table.schema
    cont_pos = {name: i for i, name in enumerate(schema.continuous)}
    binary_cols = set(schema.binary)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([schema.id_column, *schema.features, schema.multi_label, schema.binary_label])
        for i in range(len(table)):
            row: list[object] = [i + 1]
            for name in schema.features:
                if name in table.categorical:
                    row.append(table.categorical[name][i])
                else:
                    v = table.continuous[i, cont_pos[name]]
                    row.append(int(v) if name in binary_cols else repr(float(v)))
            row.append(CLASS_NAMES[table.multi[i]])
            row.append(int(table.binary[i]))
            writer.writerow(row)


@dataclass(frozen=True)
class Vocabulary:
    """String -> index map with index 0 reserved for unknown and padding."""

    name: str
    tokens: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.tokens) + 1

    def index(self, value: str) -> int:
        return self._lookup.get(value, 0)

    @cached_property
    def _lookup(self) -> dict[str, int]:
        return {tok: i + 1 for i, tok in enumerate(self.tokens)}

    def encode(self, values: Iterable[str]) -> tuple[np.ndarray, int]:
        lookup = self._lookup
        idx = np.fromiter((lookup.get(v, 0) for v in values), dtype=np.int64)
        return idx, int(np.count_nonzero(idx == 0))

    def as_dict(self) -> dict[str, int]:
        return {"UNK": 0, **self._lookup}


def build_vocab(records: RecordTable, feature: str) -> Vocabulary:
    if feature not in records.categorical:
        raise ValueError(f"{feature!r} is not a categorical feature")
    return Vocabulary(feature, tuple(sorted(set(records.categorical[feature]))))


def build_vocabs(records: RecordTable) -> dict[str, Vocabulary]:
    return {name: build_vocab(records, name) for name in records.schema.categorical}


def encode(records: RecordTable, vocabs: dict[str, Vocabulary]) -> RecordSet:
    """Replace category strings by vocabulary indices; unseen values map to 0."""
    schema = records.schema
    if set(vocabs) != set(schema.categorical):
        raise ValueError(
            f"vocabularies {sorted(vocabs)} do not match categorical features {list(schema.categorical)}"
        )
    cols = []
    unknown = {}
    for name in schema.categorical:
        idx, n_unk = vocabs[name].encode(records.categorical[name])
        cols.append(idx)
        unknown[name] = n_unk
        if n_unk:
            log.warning("%s: %d values not in the training vocabulary mapped to UNK", name, n_unk)
    cats = np.column_stack(cols) if cols else np.zeros((len(records), 0), dtype=np.int64)
    return RecordSet(
        schema_hash=schema.schema_hash(),
        continuous=np.array(records.continuous, dtype=np.float64),
        cats=cats.astype(np.int64),
        multi=records.multi.copy(),
        binary=records.binary.copy(),
        unknown_counts=unknown,
    )


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    passthrough: np.ndarray  # bool per continuous feature


STD_FLOOR = 1e-8


def fit_normalization(records: RecordTable | RecordSet, schema: FeatureSchema) -> NormalizationStats:
    """Per-feature mean and population std. Pass training records only."""
    x = np.asarray(records.continuous, dtype=np.float64)
    passthrough = schema.binary_mask
    if len(x):
        mean = x.mean(axis=0)
        std = np.maximum(x.std(axis=0), STD_FLOOR)
    else:
        mean = np.zeros(x.shape[1])
        std = np.ones(x.shape[1])
    mean = np.where(passthrough, 0.0, mean)
    std = np.where(passthrough, 1.0, std)
    return NormalizationStats(mean=mean, std=std, passthrough=passthrough)


def apply_normalization(records, stats: NormalizationStats):
    normalized = (np.asarray(records.continuous, dtype=np.float64) - stats.mean) / stats.std
    return replace(records, continuous=normalized)


@dataclass(frozen=True)
class SequenceWindow:
    """L consecutive records ending at the target; leading slots may be PAD."""

    records: tuple[FlowRecord, ...]
    multi_labels: np.ndarray
    binary_labels: np.ndarray
    mask: np.ndarray  # 1.0 for real records, 0.0 for PAD
    schema_hash: str = ""

    @property
    def target_index(self) -> int:
        return len(self.records) - 1

    def to_batch(self) -> "WindowBatch":
        return WindowBatch(
            continuous=np.stack([r.continuous for r in self.records])[None],
            cats=np.array([r.cats for r in self.records], dtype=np.int64)[None],
            multi=self.multi_labels[None].copy(),
            binary=self.binary_labels[None].copy(),
            mask=self.mask[None].copy(),
            schema_hash=self.schema_hash,
        )


@dataclass
class WindowBatch:
    continuous: np.ndarray  # (B, L, C)
    cats: np.ndarray  # (B, L, n_cat)
    multi: np.ndarray  # (B, L)
    binary: np.ndarray  # (B, L)
    mask: np.ndarray  # (B, L)
    schema_hash: str = ""

    def __len__(self) -> int:
        return self.multi.shape[0]

    @property
    def length(self) -> int:
        return self.multi.shape[1]

    def labels(self, task: str) -> np.ndarray:
        return self.binary if task == "binary" else self.multi


class WindowSet(Sequence):
    """One window per target record, gathered lazily from the record stream."""

    def __init__(self, records: RecordSet, length: int, targets: np.ndarray | None = None):
        if length < 1:
            raise ValueError(f"sequence length must be >= 1, got {length}")
        self.records = records
        self.length = int(length)
        self.targets = (
            np.arange(len(records), dtype=np.int64)
            if targets is None
            else np.asarray(targets, dtype=np.int64)
        )

    @property
    def schema_hash(self) -> str:
        return self.records.schema_hash

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(np.arange(len(self))[i])
        b = self.gather(np.array([i]))
        n_pad = int(self.length - b.mask[0].sum())
        pad = FlowRecord(
            continuous=np.zeros(self.records.continuous.shape[1]),
            cats=(0,) * self.records.cats.shape[1],
            multi_label=0,
            binary_label=0,
        )
        start = int(self.targets[i]) - self.length + 1
        recs = tuple(pad if j < n_pad else self.records[start + j] for j in range(self.length))
        return SequenceWindow(recs, b.multi[0], b.binary[0], b.mask[0], self.schema_hash)

    def subset(self, positions: np.ndarray) -> "WindowSet":
        return WindowSet(self.records, self.length, self.targets[np.asarray(positions, dtype=np.int64)])

    def gather(self, positions: np.ndarray) -> WindowBatch:
        """Materialise the windows at ``positions`` (indices into this set)."""
        targets = self.targets[np.asarray(positions, dtype=np.int64)]
        src = targets[:, None] + np.arange(-self.length + 1, 1)[None, :]
        valid = src >= 0
        src = np.where(valid, src, 0)
        r = self.records
        cont = r.continuous[src]
        cont[~valid] = 0.0
        cats = r.cats[src]
        cats[~valid] = 0
        multi = np.where(valid, r.multi[src], 0)
        binary = np.where(valid, r.binary[src], 0)
        return WindowBatch(cont, cats, multi, binary, valid.astype(np.float64), self.schema_hash)

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield self.gather(order[start : start + batch_size])


def make_windows(records: RecordSet, length: int) -> WindowSet:
    return WindowSet(records, length)


def split_validation(windows: WindowSet, fraction: float, seed: int) -> tuple[WindowSet, WindowSet]:
    """Random disjoint split of windows; validation size rounds half up."""
    if not 0 < fraction < 1:
        raise ValueError(f"validation fraction must be in (0, 1), got {fraction}")
    n = len(windows)
    n_val = int(np.floor(fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return windows.subset(train), windows.subset(val)


@dataclass
class PreparedData:
    train: RecordSet
    test: RecordSet | None
    vocabs: dict[str, Vocabulary]
    stats: NormalizationStats


def prepare(train: RecordTable, test: RecordTable | None = None) -> PreparedData:
    """Fit vocabularies and normalization on ``train`` and apply them to both partitions."""
    vocabs = build_vocabs(train)
    stats = fit_normalization(train, train.schema)
    tr = apply_normalization(encode(train, vocabs), stats)
    te = apply_normalization(encode(test, vocabs), stats) if test is not None else None
    return PreparedData(tr, te, vocabs, stats)


def histogram_text(counts: dict[str, int]) -> str:
    total = sum(counts.values())
    lines = [f"{'Total':<16}{total:>9}"]
    for name, c in counts.items():
        pct = 100.0 * c / total if total else 0.0
        lines.append(f"{name:<16}{c:>9} ({pct:.2f}%)")
    return "\n".join(lines)
