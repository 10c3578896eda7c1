"""Weight-shared twin passes and the domain-adversarial step."""

from __future__ import annotations

import numpy as np

from .layers import INFER, TRAIN
from .losses import bce_loss, contrastive_batch
from .network import Sequential


def siamese_step(trunk: Sequential, xa, xb, labels, margin: float = 1.0):
    """Forward both twins as one batch through the shared trunk and backpropagate.

    Stacking the twins keeps one parameter set whose gradients are the sum of
    both branches. Returns ``(loss, distances)``; gradients are left in the
    layers.
    """
    n = len(xa)
    out = trunk.forward(np.concatenate([xa, xb]), TRAIN)
    loss, ga, gb, d = contrastive_batch(out[:n], out[n:], labels, margin)
    trunk.backward(np.concatenate([ga, gb]))
    return loss, d


def adversarial_step(trunk: Sequential, head: Sequential, xa, xb, labels, x_target, *, margin: float = 1.0,
                     siamese_weight: float = 1.0):
    """One mixed step: contrastive loss on source pairs, domain loss on every patch.

    The head minimises the mean binary cross-entropy of the domain logits;
    its gradient reaches the trunk through the reversal layer at the head's
    input, scaled by ``-lambda``. Returns ``(siamese_loss, domain_loss,
    domain_accuracy)`` with trunk and head gradients left in their layers.
    """
    n, nt = len(xa), len(x_target)
    x = np.concatenate([xa, xb, x_target])
    feats = trunk.forward(x, TRAIN)
    s_loss, ga, gb, _ = contrastive_batch(feats[:n], feats[n:2 * n], labels, margin) if n else (0.0, None, None, None)
    dom = np.concatenate([np.zeros(2 * n), np.ones(nt)])
    logits = head.forward(feats, TRAIN)[:, 0]
    d_losses, d_grad = bce_loss(logits, dom)
    g_feat = head.backward((d_grad / len(dom))[:, None])
    if n:
        g_feat[:n] += siamese_weight * ga
        g_feat[n:2 * n] += siamese_weight * gb
    trunk.backward(g_feat)
    acc = float(np.mean((logits > 0) == (dom == 1)))
    return s_loss, float(d_losses.mean()), acc


def embed(trunk: Sequential, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Inference-mode features for a stack of centered patches."""
    out = [trunk.forward(x[s:s + batch], INFER) for s in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, trunk.layers[-1].params["bias"].size))
