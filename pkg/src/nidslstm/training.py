"""Adam, the mini-batch training loop and early stopping on validation accuracy."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .data import WindowSet
from .evaluation import evaluate
from .layers import (
    KINDS,
    TASKS,
    ModelParams,
    ModelSpec,
    init_params,
    model_backward,
    window_loss,
    with_tensors,
)
from .losses import cross_entropy, normalize_mode, sequence_loss  # noqa: F401  (re-exported)


@dataclass
class TrainConfig:
    task: str = "binary"
    loss_mode: str = "m2m"
    sequence_length: int = 10
    kind: str = "lstm"
    embed: bool = True
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 128
    epochs: int = 100
    dropout_rate: float = 0.5
    seed: int = 0
    early_stop_patience: int = 10
    validation_fraction: float = 0.1
    hidden: int = 100
    fc1: int = 50
    fc2: int = 10
    leaky_slope: float = 0.01
    forget_bias: float = 1.0
    clip_norm: float | None = None

    def __post_init__(self):
        self.loss_mode = normalize_mode(self.loss_mode)
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def build_spec(
    config: TrainConfig,
    vocab_sizes,
    n_continuous: int,
    cat_names=("proto", "service", "state"),
    schema_hash: str = "",
) -> ModelSpec:
    return ModelSpec(
        kind=config.kind,
        task=config.task,
        vocab_sizes=tuple(int(v) for v in vocab_sizes),
        n_continuous=n_continuous,
        embed=config.embed,
        cat_names=tuple(cat_names),
        hidden=config.hidden,
        fc1=config.fc1,
        fc2=config.fc2,
        leaky_slope=config.leaky_slope,
        schema_hash=schema_hash,
    )


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t) for k, t in params.tensors.items()},
        )


def optimizer_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, config: TrainConfig
) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_t, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_t[name] = p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        new_m[name] = m
        new_v[name] = v
    return with_tensors(params, new_t), OptimizerState(new_m, new_v, t)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    val_f1: list[float | None] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.epoch)

    def csv_rows(self) -> list[list]:
        """History as CSV rows. Wall-clock time is left out so files stay reproducible."""
        rows: list[list] = [["epoch", "train_loss", "val_accuracy", "val_f1"]]
        for e, l, a, f in zip(self.epoch, self.train_loss, self.val_accuracy, self.val_f1):
            rows.append([e, repr(l), repr(a), "" if f is None else repr(f)])
        return rows


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good parameters."""

    def __init__(self, message: str, params: ModelParams, history: TrainHistory):
        super().__init__(message)
        self.params = params
        self.history = history


def _seeds(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    init_ss, shuffle_ss, dropout_ss = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(init_ss),
        np.random.default_rng(shuffle_ss),
        np.random.default_rng(dropout_ss),
    )


def train(
    spec: ModelSpec,
    train_windows: WindowSet,
    val_windows: WindowSet | None,
    config: TrainConfig,
    log: Callable[[str], None] | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Train and return the parameters with the best validation accuracy.

    Without validation windows the parameters after the final epoch are
    returned. Training stops early after ``early_stop_patience`` epochs
    without a strict improvement in validation accuracy.
    """
    if len(train_windows) == 0:
        raise ValueError("empty training set")
    if train_windows.length != config.sequence_length:
        raise ValueError(
            f"windows have length {train_windows.length}, config expects {config.sequence_length}"
        )
    init_rng, shuffle_rng, dropout_rng = _seeds(config.seed)
    if params is None:
        params = init_params(spec, init_rng, forget_bias=config.forget_bias)
    history = TrainHistory()
    state = OptimizerState.zeros_like(params)
    best = params
    best_acc = -1.0
    stale = 0
    has_val = val_windows is not None and len(val_windows) > 0

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(train_windows))
        total = 0.0
        for batch in train_windows.batches(config.batch_size, order):
            try:
                loss, grads = model_backward(
                    params, batch, config.loss_mode, training=True,
                    rng=dropout_rng, dropout_rate=config.dropout_rate,
                )
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best, history) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}: loss became {loss}", best, history)
            if config.clip_norm is not None:
                grads = clip_global_norm(grads, config.clip_norm)
            params, state = optimizer_step(params, grads, state, config)
            total += loss * len(batch)
        train_loss = total / len(train_windows)

        if has_val:
            report = evaluate(params, val_windows, config.task, batch_size=max(config.batch_size, 256))
            acc, f1 = report.accuracy, report.f1
        else:
            acc, f1 = float("nan"), None
        elapsed = time.perf_counter() - start
        history.epoch.append(epoch)
        history.train_loss.append(train_loss)
        history.val_accuracy.append(acc)
        history.val_f1.append(f1)
        history.seconds.append(elapsed)
        if log is not None:
            f1_text = "-" if f1 is None else f"{f1:.4f}"
            log(f"epoch {epoch:4d}  loss {train_loss:.6f}  val_acc {acc:.4f}  val_f1 {f1_text}  {elapsed:.2f}s")

        if not has_val:
            best = params
            history.best_epoch = epoch
            continue
        if acc > best_acc:
            best_acc = acc
            best = params
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                if log is not None:
                    log(f"early stop after epoch {epoch}; best epoch {history.best_epoch}")
                break
    return best, history


def training_loss(params: ModelParams, windows: WindowSet, loss_mode: str, batch_size: int = 256) -> float:
    """Mean per-window loss with dropout off."""
    total = 0.0
    for batch in windows.batches(batch_size):
        total += window_loss(params, batch, loss_mode) * len(batch)
    return total / len(windows)
