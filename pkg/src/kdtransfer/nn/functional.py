"""Softmax and cross-entropy on logits, with gradients."""

import numpy as np

from .layers import DTYPE


def log_softmax(logits, tau=1.0):
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits, tau=1.0):
    """Row-wise temperature softmax, computed with max-subtraction in float64."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return np.exp(log_softmax(logits, tau))


def cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Returns ``(loss, dloss/dlogits)``. With ``reduction="sum"`` every sample's
    gradient is independent of the batch it sits in, which is what the attack
    code wants; ``"mean"`` is the training objective.
    """
    labels = np.asarray(labels)
    n = logits.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(n)
    losses = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    if reduction == "mean":
        return float(losses.mean()), (grad / n).astype(DTYPE)
    if reduction == "sum":
        return float(losses.sum()), grad.astype(DTYPE)
    raise ValueError(f"unknown reduction {reduction!r}")
