"""Embedding, LSTM, dense and dropout layers with hand-written backward passes.

The model is embedding -> LSTM(hidden) -> fc1 + leaky ReLU + dropout ->
[fc2 + leaky ReLU, binary task only] -> softmax head, applied at every step
of a window. The MLP baseline swaps the LSTM for a dense layer of the same
width that only sees the last record of the window.

Everything is batched over windows: activations have shape (B, L, features).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import FlowRecord, SequenceWindow, WindowBatch
from .losses import PROB_FLOOR, step_weights
from .numerics import DEFAULT_LEAKY_SLOPE, leaky_relu, leaky_relu_grad, sigmoid, softmax

TASKS = ("binary", "multi", "m2b")
KINDS = ("lstm", "mlp")
GATES = ("i", "f", "o", "c")
DEFAULT_EMBED_DIMS = (5, 3, 2)


@dataclass(frozen=True)
class ModelSpec:
    """Structural description of a model; everything needed to rebuild its tensors."""

    kind: str
    task: str
    vocab_sizes: tuple[int, ...]
    n_continuous: int
    embed: bool = True
    embed_dims: tuple[int, ...] = DEFAULT_EMBED_DIMS
    cat_names: tuple[str, ...] = ("proto", "service", "state")
    hidden: int = 100
    fc1: int = 50
    fc2: int = 10
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    schema_hash: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.vocab_sizes) != len(self.cat_names):
            raise ValueError("one vocabulary size per categorical feature is required")
        if self.embed and len(self.embed_dims) != len(self.cat_names):
            raise ValueError("one embedding width per categorical feature is required")

    @property
    def n_out(self) -> int:
        return 2 if self.task == "binary" else 10

    @property
    def has_fc2(self) -> bool:
        return self.task == "binary"

    @property
    def cat_width(self) -> int:
        return sum(self.embed_dims) if self.embed else len(self.cat_names)

    @property
    def input_dim(self) -> int:
        return self.cat_width + self.n_continuous


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def embeddings(self) -> list[np.ndarray] | None:
        if not self.spec.embed:
            return None
        return [self.tensors[f"emb.{n}"] for n in self.spec.cat_names]

    def lstm(self) -> "LstmParams":
        return LstmParams.from_tensors(self.tensors)


@dataclass(frozen=True)
class LstmParams:
    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    U_i: np.ndarray
    U_f: np.ndarray
    U_o: np.ndarray
    U_c: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        hidden, n_in = self.W_i.shape
        for g in GATES:
            if getattr(self, f"W_{g}").shape != (hidden, n_in):
                raise ValueError(f"W_{g} has shape {getattr(self, f'W_{g}').shape}, expected {(hidden, n_in)}")
            if getattr(self, f"U_{g}").shape != (hidden, hidden):
                raise ValueError(f"U_{g} has shape {getattr(self, f'U_{g}').shape}, expected {(hidden, hidden)}")
            if getattr(self, f"b_{g}").shape != (hidden,):
                raise ValueError(f"b_{g} has shape {getattr(self, f'b_{g}').shape}, expected {(hidden,)}")

    @property
    def hidden(self) -> int:
        return self.W_i.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_i.shape[1]

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], prefix: str = "lstm.") -> "LstmParams":
        return cls(**{f"{m}_{g}": tensors[f"{prefix}{m}_{g}"] for m in "WUb" for g in GATES})

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gate blocks stacked in i, f, o, c order: (4H, in), (4H, H), (4H,)."""
        W = np.concatenate([getattr(self, f"W_{g}") for g in GATES])
        U = np.concatenate([getattr(self, f"U_{g}") for g in GATES])
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
        return W, U, b


def tensor_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.embed:
        for name, t, d in zip(spec.cat_names, spec.vocab_sizes, spec.embed_dims):
            shapes[f"emb.{name}"] = (t, d)
    H, D = spec.hidden, spec.input_dim
    if spec.kind == "lstm":
        for g in GATES:
            shapes[f"lstm.W_{g}"] = (H, D)
        for g in GATES:
            shapes[f"lstm.U_{g}"] = (H, H)
        for g in GATES:
            shapes[f"lstm.b_{g}"] = (H,)
    else:
        shapes["mlp.W"] = (H, D)
        shapes["mlp.b"] = (H,)
    shapes["fc1.W"] = (spec.fc1, H)
    shapes["fc1.b"] = (spec.fc1,)
    width = spec.fc1
    if spec.has_fc2:
        shapes["fc2.W"] = (spec.fc2, spec.fc1)
        shapes["fc2.b"] = (spec.fc2,)
        width = spec.fc2
    shapes["head.W"] = (spec.n_out, width)
    shapes["head.b"] = (spec.n_out,)
    return shapes


def init_params(spec: ModelSpec, rng: np.random.Generator, forget_bias: float = 1.0) -> ModelParams:
    """Embeddings ~ U(-0.05, 0.05); weights ~ U(+-1/sqrt(fan_in)); biases 0 except forget gate."""
    tensors = {}
    for name, shape in tensor_shapes(spec).items():
        if name.startswith("emb."):
            tensors[name] = rng.uniform(-0.05, 0.05, size=shape)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.full(shape, forget_bias if name == "lstm.b_f" else 0.0)
    return ModelParams(spec, tensors)


def zero_params(spec: ModelSpec) -> ModelParams:
    return ModelParams(spec, {n: np.zeros(s) for n, s in tensor_shapes(spec).items()})


# ---------------------------------------------------------------- primitives


def embed_lookup(table: np.ndarray, index: int) -> np.ndarray:
    if not 0 <= index < table.shape[0]:
        raise IndexError(f"category index {index} outside vocabulary of size {table.shape[0]}")
    return table[index]


def dense_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """w @ x + b for a vector x, or row-wise for a stack of inputs."""
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"dense shape mismatch: w {w.shape}, b {b.shape}, x {x.shape}")
    return x @ w.T + b


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns (y, mask) with mask in {0, 1}."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0:
        return x.copy(), np.ones_like(x)
    mask = (rng.random(x.shape) >= rate).astype(np.float64)
    return x * mask / (1.0 - rate), mask


def _categorical_block(cats: np.ndarray, spec: ModelSpec, embeddings: Sequence[np.ndarray] | None):
    cats = np.asarray(cats, dtype=np.int64)
    if cats.shape[-1] != len(spec.cat_names):
        raise ValueError(f"expected {len(spec.cat_names)} categorical values, got {cats.shape[-1]}")
    if spec.embed:
        parts = []
        for j, table in enumerate(embeddings):
            idx = cats[..., j]
            if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
                raise IndexError(f"{spec.cat_names[j]} index outside vocabulary of size {table.shape[0]}")
            parts.append(table[idx])
        return np.concatenate(parts, axis=-1)
    # ordinal baseline: raw index scaled into [0, 1]
    scale = np.maximum(np.asarray(spec.vocab_sizes, dtype=np.float64) - 1.0, 1.0)
    return cats / scale


def assemble_batch(params: ModelParams, cats: np.ndarray, continuous: np.ndarray) -> np.ndarray:
    """[emb(cat_1) || ... || emb(cat_n) || continuous] over the last axis."""
    spec = params.spec
    continuous = np.asarray(continuous, dtype=np.float64)
    if continuous.shape[-1] != spec.n_continuous:
        raise ValueError(f"expected {spec.n_continuous} continuous features, got {continuous.shape[-1]}")
    return np.concatenate([_categorical_block(cats, spec, params.embeddings()), continuous], axis=-1)


def assemble_input(record: FlowRecord, embeddings: Sequence[np.ndarray]) -> np.ndarray:
    if len(record.cats) != len(embeddings):
        raise ValueError(
            f"record has {len(record.cats)} categorical values but {len(embeddings)} embedding tables"
        )
    parts = [embed_lookup(t, c) for t, c in zip(embeddings, record.cats)]
    return np.concatenate([*parts, np.asarray(record.continuous, dtype=np.float64)])


def lstm_step(p: LstmParams, x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """One LSTM step without peepholes. Works on vectors or on (B, .) stacks."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != p.n_in or h_prev.shape[-1] != p.hidden or c_prev.shape[-1] != p.hidden:
        raise ValueError(
            f"lstm_step shape mismatch: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for input {p.n_in}, hidden {p.hidden}"
        )
    i = sigmoid(x_t @ p.W_i.T + h_prev @ p.U_i.T + p.b_i)
    f = sigmoid(x_t @ p.W_f.T + h_prev @ p.U_f.T + p.b_f)
    o = sigmoid(x_t @ p.W_o.T + h_prev @ p.U_o.T + p.b_o)
    g = np.tanh(h_prev @ p.U_c.T + x_t @ p.W_c.T + p.b_c)
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def lstm_sequence(p: LstmParams, xs, h0: np.ndarray, c0: np.ndarray) -> list[np.ndarray]:
    if len(xs) == 0:
        raise ValueError("lstm_sequence needs at least one input")
    h, c = h0, c0
    out = []
    for x in xs:
        h, c = lstm_step(p, x, h, c)
        out.append(h)
    return out


# ---------------------------------------------------------------- model


@dataclass
class ForwardCache:
    x: np.ndarray  # (B, L, D) assembled inputs
    cats: np.ndarray
    probs: np.ndarray  # (B, S, K)
    last_only: bool
    rnn: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)


def _lstm_forward(p: LstmParams, x: np.ndarray):
    B, L, _ = x.shape
    H = p.hidden
    W, U, b = p.stacked()
    zx = x @ W.T + b  # (B, L, 4H)
    gates = np.empty((B, L, 4 * H))
    cs = np.empty((B, L, H))
    hs = np.empty((B, L, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(L):
        z = zx[:, t] + h @ U.T
        gates[:, t, : 3 * H] = sigmoid(z[:, : 3 * H])
        gates[:, t, 3 * H :] = np.tanh(z[:, 3 * H :])
        i, f, o, g = (gates[:, t, k * H : (k + 1) * H] for k in range(4))
        c = f * c + i * g
        h = o * np.tanh(c)
        cs[:, t] = c
        hs[:, t] = h
    return hs, {"gates": gates, "c": cs, "h": hs, "W": W, "U": U}


def _lstm_backward(cache: dict, x: np.ndarray, dhs: np.ndarray):
    gates, cs, hs, W, U = cache["gates"], cache["c"], cache["h"], cache["W"], cache["U"]
    B, L, H = hs.shape
    dz = np.empty((B, L, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(L)):
        i, f, o, g = (gates[:, t, k * H : (k + 1) * H] for k in range(4))
        c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, H))
        tc = np.tanh(cs[:, t])
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[:, t, :H] = dc * g * i * (1.0 - i)
        dz[:, t, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, t, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
        dz[:, t, 3 * H :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz[:, t] @ U
    flat_dz = dz.reshape(B * L, 4 * H)
    dW = flat_dz.T @ x.reshape(B * L, -1)
    h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1).reshape(B * L, H)
    dU = flat_dz.T @ h_prev
    db = flat_dz.sum(axis=0)
    dx = dz @ W
    grads = {}
    for k, g in enumerate(GATES):
        rows = slice(k * H, (k + 1) * H)
        grads[f"lstm.W_{g}"] = dW[rows]
        grads[f"lstm.U_{g}"] = dU[rows]
        grads[f"lstm.b_{g}"] = db[rows]
    return dx, grads


def forward_batch(
    params: ModelParams,
    batch: WindowBatch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
    last_only: bool = False,
) -> ForwardCache:
    """Per-step class probabilities for a batch of windows.

    The MLP always yields a single step (the window's last record); the LSTM
    yields one step per position unless ``last_only`` is set.
    """
    spec = params.spec
    if batch.continuous.ndim != 3:
        raise ValueError(f"expected (B, L, C) continuous features, got {batch.continuous.shape}")
    x = assemble_batch(params, batch.cats, batch.continuous)
    if spec.kind == "lstm":
        rnn_out, rnn = _lstm_forward(params.lstm(), x)
        if last_only:
            rnn_out = rnn_out[:, -1:]
    else:
        a0 = dense_forward(params["mlp.W"], params["mlp.b"], x[:, -1:])
        rnn_out = leaky_relu(a0, spec.leaky_slope)
        rnn = {"a0": a0}
        last_only = True

    head = {"rnn_out": rnn_out}
    a1 = dense_forward(params["fc1.W"], params["fc1.b"], rnn_out)
    r1 = leaky_relu(a1, spec.leaky_slope)
    d1, m1 = dropout(r1, dropout_rate, training, rng)
    head.update(a1=a1, d1=d1, drop_mask=m1, drop_rate=dropout_rate if training else 0.0)
    out = d1
    if spec.has_fc2:
        a2 = dense_forward(params["fc2.W"], params["fc2.b"], d1)
        out = leaky_relu(a2, spec.leaky_slope)
        head["a2"] = a2
    head["pre_head"] = out
    logits = dense_forward(params["head.W"], params["head.b"], out)
    probs = softmax(logits)
    return ForwardCache(x=x, cats=np.asarray(batch.cats), probs=probs, last_only=last_only, rnn=rnn, head=head)


def batch_loss(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray, loss_mode: str) -> tuple[float, np.ndarray]:
    """Mean over windows of the aggregated cross-entropy, plus the step weights used."""
    S = probs.shape[1]
    labels = labels[:, -S:]
    w = step_weights(mask[:, -S:], loss_mode)
    p = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    ce = -np.log(np.maximum(p, PROB_FLOOR))
    return float((w * ce).sum() / probs.shape[0]), w


def model_backward(
    params: ModelParams,
    batch: WindowBatch,
    loss_mode: str,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and analytic gradients (BPTT across the full window) for a batch."""
    spec = params.spec
    task_labels = batch.labels("binary" if spec.task == "binary" else "multi")
    last_only = loss_mode.lower() == "m2o"
    cache = forward_batch(params, batch, training, rng, dropout_rate, last_only=last_only)
    probs = cache.probs
    B, S, K = probs.shape
    loss, w = batch_loss(probs, task_labels, batch.mask, loss_mode)

    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, task_labels[:, -S:, None], 1.0, axis=-1)
    dlogits = (probs - onehot) * (w[..., None] / B)

    hd = cache.head
    grads: dict[str, np.ndarray] = {}
    slope = spec.leaky_slope

    def dense_back(name: str, inp: np.ndarray, dout: np.ndarray) -> np.ndarray:
        grads[f"{name}.W"] = dout.reshape(-1, dout.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])
        grads[f"{name}.b"] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return dout @ params[f"{name}.W"]

    d = dense_back("head", hd["pre_head"], dlogits)
    if spec.has_fc2:
        d = d * leaky_relu_grad(hd["a2"], slope)
        d = dense_back("fc2", hd["d1"], d)
    if hd["drop_rate"] > 0:
        d = d * hd["drop_mask"] / (1.0 - hd["drop_rate"])
    d = d * leaky_relu_grad(hd["a1"], slope)
    d_rnn = dense_back("fc1", hd["rnn_out"], d)

    x = cache.x
    if spec.kind == "lstm":
        dhs = np.zeros(cache.rnn["h"].shape)
        dhs[:, -S:] = d_rnn
        dx, g = _lstm_backward(cache.rnn, x, dhs)
        grads.update(g)
    else:
        d0 = d_rnn * leaky_relu_grad(cache.rnn["a0"], slope)
        dx = np.zeros_like(x)
        dx[:, -1:] = dense_back("mlp", x[:, -1:], d0)

    if spec.embed:
        offset = 0
        cats = cache.cats
        for j, (name, dim) in enumerate(zip(spec.cat_names, spec.embed_dims)):
            g = np.zeros_like(params[f"emb.{name}"])
            np.add.at(g, cats[..., j].reshape(-1), dx[..., offset : offset + dim].reshape(-1, dim))
            grads[f"emb.{name}"] = g
            offset += dim

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    return loss, {name: grads[name] for name in params.tensors}


def model_forward(
    params: ModelParams,
    window: SequenceWindow | WindowBatch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.5,
) -> np.ndarray:
    """Per-step probability vectors (S, K) for one window."""
    batch = window.to_batch() if isinstance(window, SequenceWindow) else window
    return forward_batch(params, batch, training, rng, dropout_rate).probs[0]


def window_loss(params: ModelParams, window: SequenceWindow | WindowBatch, loss_mode: str, **kw) -> float:
    batch = window.to_batch() if isinstance(window, SequenceWindow) else window
    cache = forward_batch(params, batch, last_only=loss_mode.lower() == "m2o", **kw)
    labels = batch.labels("binary" if params.spec.task == "binary" else "multi")
    return batch_loss(cache.probs, labels, batch.mask, loss_mode)[0]


def with_tensors(params: ModelParams, tensors: dict[str, np.ndarray]) -> ModelParams:
    return replace(params, tensors=tensors)
