"""Cross-entropy and the many-to-many / many-to-one aggregation of step losses."""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12
LOSS_MODES = ("m2m", "m2o")


def cross_entropy(probs: np.ndarray, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], PROB_FLOOR)))


def normalize_mode(mode: str) -> str:
    m = mode.lower()
    if m not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    return m


def sequence_loss(step_losses, step_mask, mode: str) -> float:
    """M2O keeps only the final step; M2M averages every unmasked step."""
    losses = np.asarray(step_losses, dtype=np.float64)
    mask = np.asarray(step_mask, dtype=np.float64)
    if losses.shape != mask.shape or losses.ndim != 1:
        raise ValueError(f"loss/mask shape mismatch: {losses.shape} vs {mask.shape}")
    if not mask.any():
        raise ValueError("every step of the sequence is masked")
    mode = normalize_mode(mode)
    if mask[-1] == 0:
        raise ValueError("the final (target) step must not be masked")
    if mode == "m2o":
        return float(losses[-1])
    return float((losses * mask).sum() / mask.sum())


def step_weights(mask: np.ndarray, mode: str) -> np.ndarray:
    """Per-window weights w[b, t] such that the window loss is sum_t w * CE.

    ``mask`` has shape (B, S). Rows are normalised so each window's weights
    sum to one.
    """
    mode = normalize_mode(mode)
    mask = np.asarray(mask, dtype=np.float64)
    if mode == "m2o":
        w = np.zeros_like(mask)
        w[:, -1] = 1.0
        return w
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("every step of a sequence is masked")
    return mask / counts
