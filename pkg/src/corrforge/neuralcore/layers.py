"""Layers with hand-written forward and backward passes.

Every layer keeps what it needs from its last ``forward`` call and consumes it
in ``backward``; parameter gradients land in ``layer.grads`` under the same
names as ``layer.params``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

TRAIN, INFER = "train", "infer"


class LayerError(RuntimeError):
    pass


@dataclass
class Tensor:
    """Dense float64 values with an optional gradient of the same shape."""

    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is not None and np.shape(self.grad) != self.values.shape:
            raise LayerError(f"grad shape {np.shape(self.grad)} != values shape {self.values.shape}")

    @property
    def shape(self) -> tuple:
        return self.values.shape


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}  # non-trained buffers (batchnorm running stats)
        self._cache = None

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise LayerError(f"{self.kind}: backward called without a matching forward")
        c, self._cache = self._cache, None
        return c

    def config(self) -> dict:
        return {"kind": self.kind}


class Conv2D(Layer):
    """Valid cross-correlation, stride 1. ``needs_input_grad=False`` skips dx (first layer)."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, needs_input_grad: bool = True):
        super().__init__()
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.needs_input_grad = needs_input_grad
        self.params = {"weight": np.zeros((out_channels, in_channels, kernel, kernel)), "bias": np.zeros(out_channels)}

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise LayerError(f"conv expects {self.in_channels} channels, got {c}")
        if h < self.kernel or w < self.kernel:
            raise LayerError(f"conv kernel {self.kernel} larger than input {h}x{w}")
        return (self.out_channels, h - self.kernel + 1, w - self.kernel + 1)

    def forward(self, x, mode=TRAIN):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise LayerError(f"conv expects (B, {self.in_channels}, H, W), got {x.shape}")
        k = self.kernel
        b, c, h, w = x.shape
        ho, wo = h - k + 1, w - k + 1
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)
        wm = self.params["weight"].reshape(self.out_channels, -1)
        out = (cols @ wm.T).reshape(b, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        self._cache = (cols, x.shape)
        return out + self.params["bias"][None, :, None, None]

    def backward(self, g):
        cols, (b, c, h, w) = self._take_cache()
        k, o = self.kernel, self.out_channels
        ho, wo = g.shape[2], g.shape[3]
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        self.grads = {"weight": (gm.T @ cols).reshape(self.params["weight"].shape), "bias": gm.sum(axis=0)}
        if not self.needs_input_grad:
            return None
        # col2im: window gradients laid out offset-major so each shift is one contiguous block
        wr = np.ascontiguousarray(self.params["weight"].transpose(2, 3, 0, 1)).reshape(k * k, o, c)
        dcols = np.matmul(gm[None], wr).reshape(k, k, b, ho, wo, c)
        dx = np.zeros((b, h, w, c))
        for i in range(k):
            for j in range(k):
                dx[:, i:i + ho, j:j + wo, :] += dcols[i, j]
        return dx.transpose(0, 3, 1, 2)

    def config(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels, "k": self.kernel,
                "input_grad": self.needs_input_grad}


class AvgPool2(Layer):
    """2x2 mean pooling with stride 2; a trailing odd row/column is dropped."""

    kind = "avgpool"

    def output_shape(self, shape):
        c, h, w = shape
        if h < 2 or w < 2:
            raise LayerError(f"avgpool needs at least 2x2 input, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, mode=TRAIN):
        if x.ndim != 4:
            raise LayerError(f"avgpool expects (B, C, H, W), got {x.shape}")
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        self._cache = x.shape
        return x[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def backward(self, g):
        b, c, h, w = self._take_cache()
        h2, w2 = g.shape[2], g.shape[3]
        dx = np.zeros((b, c, h, w))
        up = np.broadcast_to((g / 4.0)[:, :, :, None, :, None], (b, c, h2, 2, w2, 2))
        dx[:, :, : 2 * h2, : 2 * w2] = up.reshape(b, c, 2 * h2, 2 * w2)
        return dx


class BatchNorm(Layer):
    """Per-channel normalisation (per feature for 2-D input), eps 1e-5."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.state = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise LayerError(f"batchnorm expects {self.channels} channels, got {shape[0]}")
        return shape

    def _axes(self, x):
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise LayerError(f"batchnorm expects (B, {self.channels}[, H, W]), got {x.shape}")
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bc(v, x):
        return v[None, :] if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, mode=TRAIN):
        axes = self._axes(x)
        if mode == TRAIN:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // self.channels
            if n < 2:
                raise LayerError("batchnorm in train mode needs more than one value per channel")
            m = self.momentum
            self.state["running_mean"] = (1 - m) * self.state["running_mean"] + m * mu
            self.state["running_var"] = (1 - m) * self.state["running_var"] + m * var * n / (n - 1)
        else:
            mu, var = self.state["running_mean"], self.state["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bc(mu, x)) * self._bc(inv, x)
        self._cache = (xhat, inv, mode, axes)
        return xhat * self._bc(self.params["gamma"], x) + self._bc(self.params["beta"], x)

    def backward(self, g):
        xhat, inv, mode, axes = self._take_cache()
        self.grads = {"gamma": (g * xhat).sum(axis=axes), "beta": g.sum(axis=axes)}
        dxhat = g * self._bc(self.params["gamma"], g)
        if mode != TRAIN:
            return dxhat * self._bc(inv, g)
        n = g.size // self.channels
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        return self._bc(inv, g) / n * (n * dxhat - self._bc(s1, g) - xhat * self._bc(s2, g))

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}


class Softplus(Layer):
    kind = "softplus"

    def forward(self, x, mode=TRAIN):
        self._cache = x
        return np.logaddexp(0.0, x)

    def backward(self, g):
        return g * expit(self._take_cache())


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, mode=TRAIN):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._take_cache())


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.params = {"weight": np.zeros((in_features, out_features)), "bias": np.zeros(out_features)}

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise LayerError(f"dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, x, mode=TRAIN):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise LayerError(f"dense expects (B, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, g):
        x = self._take_cache()
        self.grads = {"weight": x.T @ g, "bias": g.sum(axis=0)}
        return g @ self.params["weight"].T

    def config(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class Dropout(Layer):
    """Kept for architectural fidelity; only probability 0 (pass-through) is supported."""

    kind = "dropout"

    def __init__(self, p: float = 0.0):
        super().__init__()
        if p != 0.0:
            raise LayerError("only dropout probability 0 is supported")
        self.p = p

    def forward(self, x, mode=TRAIN):
        self._cache = True
        return x

    def backward(self, g):
        self._take_cache()
        return g

    def config(self):
        return {"kind": self.kind, "p": self.p}


class GradientReversal(Layer):
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""

    kind = "grl"

    def __init__(self, lam: float = 0.01):
        super().__init__()
        self.lam = float(lam)

    def forward(self, x, mode=TRAIN):
        self._cache = True
        return x

    def backward(self, g):
        self._take_cache()
        return -self.lam * g

    def config(self):
        return {"kind": self.kind, "lambda": self.lam}


def layer_forward(layer: Layer, x: Tensor, mode: str = TRAIN) -> Tensor:
    if mode not in (TRAIN, INFER):
        raise LayerError(f"mode must be {TRAIN!r} or {INFER!r}")
    return Tensor(layer.forward(x.values, mode))


def layer_backward(layer: Layer, upstream: Tensor):
    """Input gradient (``None`` when the layer skips it) and parameter gradients."""
    dx = layer.backward(upstream.values)
    return (None if dx is None else Tensor(dx)), dict(layer.grads)
