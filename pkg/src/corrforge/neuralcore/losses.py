"""Contrastive and binary cross-entropy losses with their derivatives."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

CORRESPONDING, NONCORRESPONDING = 1, 0


def contrastive_loss(distance, label, margin: float = 1.0):
    """``d^2/2`` for corresponding pairs, ``max(0, margin - d)^2 / 2`` otherwise.

    Works on scalars or arrays; returns ``(loss, dloss/ddistance)``.
    """
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    if margin <= 0:
        raise ValueError("margin must be positive")
    pos = np.asarray(label) == CORRESPONDING
    hinge = np.maximum(0.0, margin - d)
    loss = np.where(pos, 0.5 * d * d, 0.5 * hinge * hinge)
    grad = np.where(pos, d, -hinge)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def contrastive_batch(fa: np.ndarray, fb: np.ndarray, labels, margin: float = 1.0):
    """Mean contrastive loss over a batch and its gradients w.r.t. both embeddings."""
    diff = fa - fb
    d = np.sqrt(np.sum(diff * diff, axis=1))
    loss, dd = contrastive_loss(d, labels, margin)
    pos = np.asarray(labels) == CORRESPONDING
    # d(d)/d(fa) = diff / d; for positives dd = d so the product is diff itself
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(pos, 1.0, np.where(d > 0, dd / d, 0.0))
    n = len(d)
    ga = scale[:, None] * diff / n
    return float(loss.mean()), ga, -ga, d


def bce_loss(logit, label):
    """``softplus(z) - y z``, the stable form of the binary cross-entropy; returns ``(loss, dloss/dz)``."""
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    loss = np.logaddexp(0.0, z) - y * z
    grad = expit(z) - y
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad
