"""Central finite-difference checks for layers and whole networks."""

from __future__ import annotations

import numpy as np

from .layers import TRAIN, Layer


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)


def check_layer(layer: Layer, x: np.ndarray, *, h: float = 1e-5, mode: str = TRAIN, seed: int = 0) -> dict:
    """Relative error of analytic vs numeric gradients of ``sum(r * layer(x))`` for random ``r``.

    Returns ``{"input": err, "<param>": err, ...}``.
    """
    rng = np.random.default_rng(seed)
    r = rng.normal(size=layer.forward(x, mode).shape)

    def f(inp):
        return float(np.sum(r * layer.forward(inp, mode)))

    layer.forward(x, mode)
    dx = layer.backward(r)
    grads = {k: v.copy() for k, v in layer.grads.items()}
    out = {}
    if dx is not None:
        num = np.zeros_like(x)
        flat, nflat = x.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(x)
            flat[i] = old - h
            fm = f(x)
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * h)
        out["input"] = rel_error(dx, num)
    for key, p in layer.params.items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(x)
            flat[i] = old - h
            fm = f(x)
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * h)
        out[key] = rel_error(grads[key], num)
    return out


def probe_gradients(loss_and_grads, params: dict, n_probes: int, *, h: float = 1e-4, seed: int = 0):
    """Compare analytic gradients with central differences on randomly chosen weights.

    ``loss_and_grads()`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params`` (live arrays, perturbed in place). Returns per-probe relative
    errors ``|a - n| / max(|a|, |n|, floor)`` with a floor that ignores
    probes whose gradient is at roundoff level.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads()
    grads = {k: v.copy() for k, v in grads.items()}
    names = list(params)
    sizes = np.array([params[n].size for n in names], dtype=float)
    errs = []
    scale = max(np.abs(g).max() for g in grads.values())
    for _ in range(n_probes):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = params[name].reshape(-1)
        i = rng.integers(flat.size)
        old = flat[i]
        flat[i] = old + h
        fp, _ = loss_and_grads()
        flat[i] = old - h
        fm, _ = loss_and_grads()
        flat[i] = old
        num = (fp - fm) / (2 * h)
        ana = grads[name].reshape(-1)[i]
        den = max(abs(ana), abs(num), 1e-6 * scale)
        errs.append(abs(ana - num) / den)
    return np.array(errs)
