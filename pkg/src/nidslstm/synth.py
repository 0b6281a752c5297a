"""Synthetic flow streams whose labels follow a planted temporal rule.

The label of record i depends on the ``proto`` values of records
i-k+1 .. i, so a model that sees only the current record cannot beat the
context-free Bayes rate computed by :func:`context_free_bayes_accuracy`.

Rules
-----
``vote`` (default)
    Each proto value carries a hidden residue g(v) in Z_K (balanced over the
    vocabulary). The class is the most frequent residue among the last k
    records; ties go to the most recent of the tied residues. For K = 2 and
    odd k this is a majority vote: a single record is informative but not
    decisive.
``sum``
    The class is (g(p_{i-k+1}) + ... + g(p_i)) mod K. With uniform protos the
    current record alone says nothing about the class, but neither does any
    subset of fewer than k records, which makes it very hard to learn by
    gradient descent.
``repeat``
    Binary, k = 2: attack iff the previous proto equals the current one.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import CLASS_NAMES, UNSW_SCHEMA, FeatureSchema, RecordSet, RecordTable, Vocabulary

RULES = ("vote", "sum", "repeat")
SERVICES = ("-", "dns", "ftp", "http")
STATES = ("CON", "FIN", "INT")
N_PROTOTYPES = 8


@dataclass
class SynthData:
    records: RecordSet
    vocabs: dict[str, Vocabulary]
    residues: np.ndarray  # residue per proto index (index 0 unused)
    clean_labels: np.ndarray
    rule: str
    k: int
    num_classes: int
    noise: float
    schema: FeatureSchema = UNSW_SCHEMA

    def to_table(self) -> RecordTable:
        """Raw-string view, e.g. for writing a UNSW-layout CSV."""
        cats = {}
        for j, name in enumerate(self.schema.categorical):
            tokens = np.array(("",) + self.vocabs[name].tokens, dtype=object)
            cats[name] = tokens[self.records.cats[:, j]]
        return RecordTable(
            self.schema,
            self.records.continuous.copy(),
            cats,
            self.records.multi.copy(),
            self.records.binary.copy(),
        )


def vote(residue_window: np.ndarray, num_classes: int) -> np.ndarray:
    """Plurality over the last axis (oldest first); ties go to the most recent."""
    counts = np.zeros(residue_window.shape[:-1] + (num_classes,), dtype=np.int64)
    for j in range(residue_window.shape[-1]):
        np.put_along_axis(
            counts,
            residue_window[..., j : j + 1],
            np.take_along_axis(counts, residue_window[..., j : j + 1], axis=-1) + 1,
            axis=-1,
        )
    top = counts.max(axis=-1)
    best = np.full(residue_window.shape[:-1], -1, dtype=np.int64)
    for j in reversed(range(residue_window.shape[-1])):
        r = residue_window[..., j]
        hit = (best < 0) & (np.take_along_axis(counts, r[..., None], axis=-1)[..., 0] == top)
        best = np.where(hit, r, best)
    return best


def apply_rule(protos: np.ndarray, residues: np.ndarray, k: int, num_classes: int, rule: str) -> np.ndarray:
    """Noise-free class of every record in a stream of proto indices.

    Records before the start of the stream simply do not take part.
    """
    protos = np.asarray(protos, dtype=np.int64)
    n = len(protos)
    g = residues[protos]
    if rule == "sum":
        total = np.zeros(n, dtype=np.int64)
        for lag in range(k):
            total[lag:] += g[: n - lag]
        return total % num_classes
    if rule == "vote":
        out = np.empty(n, dtype=np.int64)
        for i in range(min(k - 1, n)):
            out[i] = vote(g[None, : i + 1], num_classes)[0]
        if n >= k:
            windows = np.lib.stride_tricks.sliding_window_view(g, k)
            out[k - 1 :] = vote(windows, num_classes)
        return out
    if rule == "repeat":
        out = np.zeros(n, dtype=np.int64)
        out[1:] = protos[1:] == protos[:-1]
        return out
    raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")


def synth_generate(
    n: int,
    num_classes: int = 2,
    pattern_length: int = 3,
    seed: int = 0,
    vocab_size: int = 24,
    noise: float = 0.005,
    rule: str = "vote",
) -> SynthData:
    if pattern_length < 2:
        raise ValueError(f"pattern length must be >= 2, got {pattern_length}")
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
    if not 0 <= noise <= 0.01:
        raise ValueError("label noise must be in [0, 0.01]")
    if rule == "repeat" and (num_classes != 2 or pattern_length != 2):
        raise ValueError("the repeat rule is binary with pattern length 2")
    if n <= pattern_length:
        raise ValueError("n must be much larger than the pattern length")
    rng = np.random.default_rng(seed)
    schema = UNSW_SCHEMA

    residues = np.zeros(vocab_size + 1, dtype=np.int64)
    residues[1:] = rng.permutation(np.arange(vocab_size) % num_classes)
    protos = rng.integers(1, vocab_size + 1, size=n)
    services = rng.integers(1, len(SERVICES) + 1, size=n)
    states = rng.integers(1, len(STATES) + 1, size=n)

    clean = apply_rule(protos, residues, pattern_length, num_classes, rule)
    labels = clean.copy()
    flip = rng.random(n) < noise
    shift = rng.integers(1, num_classes, size=n)
    labels[flip] = (clean[flip] + shift[flip]) % num_classes

    # Continuous features come from a small shared pool so that no record is
    # individually identifiable; otherwise a large model can memorise labels.
    binary_cols = schema.binary_mask
    pool = rng.standard_normal((N_PROTOTYPES, len(schema.continuous)))
    pool[:, binary_cols] = rng.integers(0, 2, size=(N_PROTOTYPES, int(binary_cols.sum())))
    cont = pool[rng.integers(0, N_PROTOTYPES, size=n)]

    vocabs = {
        "proto": Vocabulary("proto", tuple(f"p{i:02d}" for i in range(vocab_size))),
        "service": Vocabulary("service", SERVICES),
        "state": Vocabulary("state", STATES),
    }
    records = RecordSet(
        schema_hash=schema.schema_hash(),
        continuous=cont,
        cats=np.column_stack([protos, services, states]).astype(np.int64),
        multi=labels,
        binary=(labels != 0).astype(np.int64),
    )
    return SynthData(records, vocabs, residues, clean, rule, pattern_length, num_classes, noise, schema)


def _label_given_current(data: SynthData) -> np.ndarray:
    """P(clean class = c | current proto = v) in the stationary part of the stream, shape (V, K).

    The current proto matters only through its residue, so this enumerates
    the K**(k-1) residue histories weighted by residue frequency.
    """
    V = len(data.residues) - 1
    K = data.num_classes
    out = np.zeros((V, K))
    if data.rule == "repeat":
        out[:, 1] = 1.0 / V
        out[:, 0] = 1.0 - 1.0 / V
        return out
    freq = np.bincount(data.residues[1:], minlength=K) / V
    hist = np.array(list(itertools.product(range(K), repeat=data.k - 1)), dtype=np.int64)
    hist = hist.reshape(len(hist), data.k - 1)
    weight = np.prod(freq[hist], axis=1) if data.k > 1 else np.ones(len(hist))
    by_residue = np.zeros((K, K))
    for r in range(K):
        windows = np.column_stack([hist, np.full(len(hist), r)])
        if data.rule == "sum":
            cls = windows.sum(axis=1) % K
        else:
            cls = vote(windows, K)
        by_residue[r] = np.bincount(cls, weights=weight, minlength=K)
    return by_residue[data.residues[1:]]


def _noisy(p_clean: np.ndarray, noise: float) -> np.ndarray:
    K = p_clean.shape[-1]
    return (1 - noise) * p_clean + noise * (1 - p_clean) / (K - 1)


def context_free_bayes_accuracy(data: SynthData) -> float:
    """Best achievable accuracy from the current record alone."""
    p = _noisy(_label_given_current(data), data.noise)
    return float(p.max(axis=1).mean())


def context_aware_bayes_accuracy(data: SynthData) -> float:
    """Best achievable accuracy when the last k records are visible."""
    return 1.0 - data.noise


def class_prior(data: SynthData) -> np.ndarray:
    return _noisy(_label_given_current(data), data.noise).mean(axis=0)
