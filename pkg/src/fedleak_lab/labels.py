"""Label recovery from the gradient of the final fully-connected layer.

The head weight is stored as (features, classes), so its gradient is the
K x N matrix whose column sums are negative for classes present in the batch
(softmax minus one-hot is negative only on the true class).
"""

from __future__ import annotations

import numpy as np

from .models import Model, ParameterSet


def head_gradient(model: Model, grads) -> np.ndarray:
    """The K x N weight-gradient block of the model head."""
    name = f"{model.head.name}.weight"
    if isinstance(grads, ParameterSet):
        block = grads[name]
    else:
        flat = np.asarray(grads, dtype=np.float64).ravel()
        offsets = {}
        pos = 0
        for pname, shape in model.param_shapes:
            size = int(np.prod(shape))
            offsets[pname] = (pos, size, shape)
            pos += size
        start, size, shape = offsets[name]
        block = flat[start:start + size].reshape(shape)
    expected = (model.head.in_features, model.head.out_features)
    if block.shape != expected:
        raise ValueError(f"head gradient has shape {block.shape}, expected {expected}")
    return np.asarray(block, dtype=np.float64)


def _ascending_by_sum(sums: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(sums.size), sums))


def infer_labels_minsum(delta_w, batch_size: int) -> np.ndarray:
    """The ``batch_size`` classes with the smallest column sums, ascending by sum."""
    dw = np.asarray(delta_w, dtype=np.float64)
    if dw.ndim != 2:
        raise ValueError("expected a K x N matrix")
    n = dw.shape[1]
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds {n} classes; use infer_label_counts")
    if batch_size < 0:
        raise ValueError("batch size must be non-negative")
    return _ascending_by_sum(dw.sum(axis=0))[:batch_size].astype(np.int64)


def infer_label_counts(delta_w, batch_size: int) -> np.ndarray:
    """Per-class counts floor(B * colsum(dW - max) / total(dW - max)), topped up to B.

    Missing samples go to the classes with the lowest column sums in turn.
    An all-equal matrix gives uniform counts with the remainder on the
    lowest class indices.
    """
    dw = np.asarray(delta_w, dtype=np.float64)
    if dw.ndim != 2:
        raise ValueError("expected a K x N matrix")
    if batch_size < 0:
        raise ValueError("batch size must be non-negative")
    n = dw.shape[1]
    counts = np.zeros(n, dtype=np.int64)
    if batch_size == 0:
        return counts
    shifted = dw - dw.max()
    total = shifted.sum()
    if total == 0.0:
        counts[:] = batch_size // n
        counts[: batch_size % n] += 1
        return counts
    counts = np.floor(batch_size * shifted.sum(axis=0) / total + 1e-12).astype(np.int64)
    order = _ascending_by_sum(dw.sum(axis=0))
    i = 0
    while counts.sum() < batch_size:
        counts[order[i % n]] += 1
        i += 1
    return counts


def counts_to_labels(counts) -> np.ndarray:
    """Expand per-class counts into a sorted label list."""
    counts = np.asarray(counts, dtype=np.int64)
    return np.repeat(np.arange(counts.size), counts)


def infer_labels(delta_w, batch_size: int) -> np.ndarray:
    """Min-sum rule when the batch fits in the class count, count rule otherwise."""
    dw = np.asarray(delta_w)
    if batch_size <= dw.shape[1]:
        return infer_labels_minsum(dw, batch_size)
    return counts_to_labels(infer_label_counts(dw, batch_size))


def refine_labels(guess, num_classes: int) -> np.ndarray:
    """One-hot probability rows for a label guess; the attack optimizes them when enabled."""
    guess = np.asarray(guess, dtype=np.int64)
    if np.any(guess < 0) or np.any(guess >= num_classes):
        raise ValueError("label guess out of range")
    out = np.zeros((guess.size, num_classes))
    out[np.arange(guess.size), guess] = 1.0
    return out
