"""Dense arithmetic, activations and a central-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` values in float64. The helpers here
validate shapes up front so that a mismatch is reported with both shapes
instead of surfacing as a broadcasting surprise further down.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64
DEFAULT_LEAKY_SLOPE = 0.01


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a 2-D float64 matrix, optionally from a flat row-major buffer."""
    arr = np.asarray(values, dtype=DTYPE)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ValueError(f"buffer of length {arr.size} cannot form a {rows}x{cols} matrix")
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_act(x: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=DTYPE))


def leaky_relu(x: np.ndarray, slope: float = DEFAULT_LEAKY_SLOPE) -> np.ndarray:
    if slope < 0:
        raise ValueError(f"leaky ReLU slope must be >= 0, got {slope}")
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x >= 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float = DEFAULT_LEAKY_SLOPE) -> np.ndarray:
    return np.where(np.asarray(x) >= 0, 1.0, slope)


def softmax(v: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction.

    Accepts a single vector or a stack of them (rows are normalised
    independently).
    """
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def finite_diff_grad(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    order: int = 2,
) -> dict[str, np.ndarray]:
    """Central-difference estimate of d loss / d param for every named tensor.

    ``order=2`` is the plain (f(t+e) - f(t-e)) / 2e stencil. ``order=4``
    Richardson-combines the e and 2e central differences, which permits a
    larger step and so much less cancellation error on tiny gradients.

    ``params`` is perturbed in place one element at a time and restored
    afterwards. ``loss_fn`` must be deterministic; this is checked by
    evaluating it twice at the unperturbed point.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    base = float(loss_fn(params))
    again = float(loss_fn(params))
    if base != again:
        raise ValueError(
            f"loss_fn is not deterministic ({base!r} != {again!r}); freeze dropout masks"
        )

    grads: dict[str, np.ndarray] = {}
    for name, tensor in params.items():
        if tensor.dtype != DTYPE:
            raise TypeError(f"{name}: gradient checks require float64, got {tensor.dtype}")
        g = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]

            def central(step: float) -> float:
                flat[i] = orig + step
                plus = float(loss_fn(params))
                flat[i] = orig - step
                minus = float(loss_fn(params))
                flat[i] = orig
                return (plus - minus) / (2.0 * step)

            d1 = central(epsilon)
            gflat[i] = d1 if order == 2 else (4.0 * d1 - central(2.0 * epsilon)) / 3.0
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
