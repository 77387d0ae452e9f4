"""Softmax and cross-entropy on plain arrays, plus their graph counterparts."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import LOG_EPS, Tensor


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ValueError(f"label {bad} out of range [0, {num_classes})")
    return labels


def cross_entropy(probs, labels) -> float:
    """Batch mean of -log(max(q_y, eps))."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = _check_labels(labels, probs.shape[-1])
    picked = probs[np.arange(labels.size), labels]
    return float(np.mean(-np.log(np.maximum(picked, LOG_EPS))))


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = _check_labels(labels, num_classes)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy_graph(probs: Tensor, labels) -> Tensor:
    """Recorded version of :func:`cross_entropy` taking a probability tensor."""
    mask = one_hot(labels, probs.shape[-1], probs.data.dtype)
    picked = ag.sum(ag.mul(probs, mask), axis=-1)
    return ag.mean(ag.mul(ag.log(picked), -1.0))
