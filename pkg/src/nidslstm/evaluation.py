"""Confusion matrices, accuracy/precision/recall/F1, M2B merging, sweeps and timing."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .data import CLASS_NAMES, RecordSet, WindowBatch, WindowSet, make_windows, split_validation
from .layers import ModelParams, forward_batch

if TYPE_CHECKING:
    from .training import TrainConfig


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[true, predicted]."""

    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(preds, labels, k: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions vs {labels.size} labels")
    for what, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{what} class id outside [0, {k})")
    counts = np.bincount(labels * k + preds, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts)


@dataclass
class EvalReport:
    accuracy: float
    confusion: ConfusionMatrix
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    per_class_recall: list[float] | None = None
    macro_recall: float | None = None
    zero_division: list[str] = field(default_factory=list)
    seconds_per_sequence: float | None = None

    def rows(self) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = [("accuracy", self.accuracy)]
        for name in ("precision", "recall", "f1", "macro_recall"):
            v = getattr(self, name)
            if v is not None:
                out.append((name, v))
        if self.per_class_recall is not None:
            names = CLASS_NAMES if self.confusion.k == len(CLASS_NAMES) else [str(i) for i in range(self.confusion.k)]
            out.extend((f"recall[{n}]", r) for n, r in zip(names, self.per_class_recall))
        out.append(("n", self.confusion.total))
        if self.zero_division:
            out.append(("zero_division", ";".join(self.zero_division)))
        if self.seconds_per_sequence is not None:
            out.append(("seconds_per_sequence", self.seconds_per_sequence))
        return out

    def text(self) -> str:
        lines = []
        for name, v in self.rows():
            lines.append(f"{name:<24}{v:.6f}" if isinstance(v, float) else f"{name:<24}{v}")
        lines.append("confusion (rows = true, cols = predicted):")
        for row in self.confusion.counts:
            lines.append("  " + " ".join(f"{int(c):>8}" for c in row))
        return "\n".join(lines)


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix) -> EvalReport:
    """Accuracy for any k; P/R/F1 with attack (class 1) as positive when k == 2."""
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    c = cm.counts
    report = EvalReport(accuracy=float(np.trace(c)) / total, confusion=cm)
    flags: list[str] = []
    if cm.k == 2:
        tn, fp, fn, tp = (float(v) for v in c.ravel())
        report.accuracy = (tp + tn) / (tp + tn + fp + fn)
        p = _ratio(tp, tp + fp, "precision", flags)
        r = _ratio(tp, tp + fn, "recall", flags)
        report.precision, report.recall = p, r
        report.f1 = _ratio(2 * p * r, p + r, "f1", flags)
    else:
        support = c.sum(axis=1)
        recalls = [float(c[i, i]) / support[i] if support[i] else 0.0 for i in range(cm.k)]
        report.per_class_recall = recalls
        present = support > 0
        report.macro_recall = float(np.mean(np.asarray(recalls)[present])) if present.any() else 0.0
    report.zero_division = flags
    return report


def m2b_merge(multi_preds, multi_labels) -> tuple[np.ndarray, np.ndarray]:
    """Collapse every attack class onto 1 and keep Normal (0) as 0."""
    p = (np.asarray(multi_preds) != 0).astype(np.int64)
    l = (np.asarray(multi_labels) != 0).astype(np.int64)
    return p, l


def _check_schema(params: ModelParams, windows: WindowSet | WindowBatch) -> None:
    expected = params.spec.schema_hash
    got = windows.schema_hash
    if expected and got and expected != got:
        raise ValueError(
            f"windows were built with schema {got[:12]}..., the model expects {expected[:12]}..."
        )


def predict(params: ModelParams, windows: WindowSet, batch_size: int = 512) -> np.ndarray:
    """Argmax class of the final step of each window, dropout off (lowest index wins ties)."""
    _check_schema(params, windows)
    out = np.empty(len(windows), dtype=np.int64)
    pos = 0
    for batch in windows.batches(batch_size):
        probs = forward_batch(params, batch, training=False, last_only=True).probs[:, -1]
        out[pos : pos + len(batch)] = np.argmax(probs, axis=-1)
        pos += len(batch)
    return out


def target_labels(windows: WindowSet, task: str) -> np.ndarray:
    recs = windows.records
    return (recs.binary if task == "binary" else recs.multi)[windows.targets]


def evaluate(params: ModelParams, windows: WindowSet, task: str, batch_size: int = 512) -> EvalReport:
    preds = predict(params, windows, batch_size)
    labels = target_labels(windows, task)
    if task == "m2b":
        preds, labels = m2b_merge(preds, labels)
    k = 2 if task in ("binary", "m2b") else len(CLASS_NAMES)
    return metrics(confusion(preds, labels, k))


def sweep_sequence_length(
    records: RecordSet,
    vocab_sizes,
    config: "TrainConfig",
    lengths,
    test_records: RecordSet | None = None,
    log=None,
) -> list[dict]:
    """Train one model per window length under identical seeds and config."""
    from dataclasses import replace

    from .training import build_spec, train

    lengths = list(lengths)
    if not lengths or min(lengths) < 1:
        raise ValueError("sweep lengths must be a nonempty list of values >= 1")
    rows = []
    for length in lengths:
        cfg = replace(config, sequence_length=int(length))
        windows = make_windows(records, cfg.sequence_length)
        tr, val = split_validation(windows, cfg.validation_fraction, cfg.seed)
        spec = build_spec(cfg, vocab_sizes, records.continuous.shape[1], schema_hash=records.schema_hash)
        params, history = train(spec, tr, val, cfg, log=log)
        row = {"length": int(length), "val_accuracy": evaluate(params, val, cfg.task).accuracy}
        if test_records is not None:
            row["test_accuracy"] = evaluate(params, make_windows(test_records, cfg.sequence_length), cfg.task).accuracy
        rows.append(row)
        if log is not None:
            log(f"length {length}: " + ", ".join(f"{k} {v:.4f}" for k, v in row.items() if k != "length"))
    return rows


def _random_batch(params: ModelParams, length: int, batch: int, rng: np.random.Generator) -> WindowBatch:
    spec = params.spec
    cats = np.stack([rng.integers(0, t, size=(batch, length)) for t in spec.vocab_sizes], axis=-1)
    cont = rng.standard_normal((batch, length, spec.n_continuous))
    zeros = np.zeros((batch, length), dtype=np.int64)
    return WindowBatch(cont, cats, zeros, zeros, np.ones((batch, length)), spec.schema_hash)


def benchmark_prediction_time(
    params: ModelParams,
    lengths,
    repetitions: int = 30,
    warmup: int = 5,
    seed: int = 0,
) -> list[dict]:
    """Median wall-clock seconds to classify one window, per window length.

    Repetitions are interleaved across lengths (in a fresh random order each
    round) so that background load drifts hit every length alike instead of
    whichever one happened to be running.
    """
    if repetitions < 30:
        raise ValueError("at least 30 timed repetitions are required")
    rng = np.random.default_rng(seed)
    lengths = [int(n) for n in lengths]
    batches = [_random_batch(params, n, 1, rng) for n in lengths]
    for batch in batches:
        for _ in range(warmup):
            forward_batch(params, batch, last_only=True)
    times: list[list[float]] = [[] for _ in lengths]
    for _ in range(repetitions):
        for j in rng.permutation(len(lengths)):
            t0 = time.perf_counter()
            forward_batch(params, batches[j], last_only=True)
            times[j].append(time.perf_counter() - t0)
    return [
        {"length": n, "seconds_per_sequence": float(np.median(t))} for n, t in zip(lengths, times)
    ]


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares line through (xs, ys): (slope, intercept, R^2)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def write_rows_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
