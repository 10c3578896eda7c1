"""Layer stacks, architecture specs, initialisation, SGD and the weight file."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import (
    INFER,
    TRAIN,
    AvgPool2,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GradientReversal,
    Layer,
    LayerError,
    Softplus,
)

MAGIC = b"CFNN"
FORMAT_VERSION = 1
INPUT_SHAPE = (2, 64, 64)


class ArchError(ValueError):
    pass


def siamese_arch(n_features: int = 10, input_shape=INPUT_SHAPE) -> dict:
    """Three conv/pool/batchnorm/softplus stages, a 128-unit hidden layer and ``n_features`` outputs."""
    layers = []
    for i, (ch, k) in enumerate(((16, 7), (32, 5), (64, 5))):
        layers += [{"kind": "conv", "out": ch, "k": k, "input_grad": i > 0}, {"kind": "avgpool"},
                   {"kind": "batchnorm"}, {"kind": "softplus"}]
    layers += [{"kind": "flatten"}, {"kind": "dense", "out": 128}, {"kind": "softplus"},
               {"kind": "dropout", "p": 0.0}, {"kind": "dense", "out": n_features}]
    return {"name": "trunk", "input": list(input_shape), "init": "normal", "std": 0.05, "layers": layers}


def domain_head_arch(n_features: int = 10, lam: float = 0.01, hidden=(500, 1000)) -> dict:
    layers = [{"kind": "grl", "lambda": lam}]
    for h in hidden:
        layers += [{"kind": "dense", "out": h}, {"kind": "softplus"}]
    layers += [{"kind": "dense", "out": 1}]
    return {"name": "domain_head", "input": [n_features], "init": "glorot", "layers": layers}


class Sequential:
    def __init__(self, layers: list[Layer], arch: dict):
        self.layers = layers
        self.arch = arch

    @property
    def input_shape(self) -> tuple:
        return tuple(self.arch["input"])

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        if mode not in (TRAIN, INFER):
            raise LayerError(f"mode must be {TRAIN!r} or {INFER!r}")
        if tuple(x.shape[1:]) != self.input_shape:
            raise LayerError(f"{self.arch.get('name', 'network')} expects input {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, g: np.ndarray):
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break
        return g

    def named_params(self):
        """(name, array) for every trainable array in declaration order."""
        for i, layer in enumerate(self.layers):
            for key, val in layer.params.items():
                yield f"{i}.{layer.kind}.{key}", val

    def named_grads(self):
        for i, layer in enumerate(self.layers):
            for key in layer.params:
                yield f"{i}.{layer.kind}.{key}", layer.grads[key]

    def named_state(self):
        for i, layer in enumerate(self.layers):
            for key, val in layer.state.items():
                yield f"{i}.{layer.kind}.{key}", val

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def grads(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def set_array(self, name: str, value: np.ndarray) -> None:
        idx, _kind, key = name.split(".")
        layer = self.layers[int(idx)]
        target = layer.params if key in layer.params else layer.state
        if target[key].shape != value.shape:
            raise ArchError(f"{name}: shape {value.shape} != {target[key].shape}")
        target[key] = np.array(value, dtype=np.float64)

    def copy(self) -> "Sequential":
        other = build(self.arch)
        for name, val in list(self.named_params()) + list(self.named_state()):
            other.set_array(name, val)
        return other


def build(arch: dict) -> Sequential:
    """Instantiate layers with zero weights, checking that shapes compose."""
    errors = []
    if "input" not in arch or not arch.get("layers"):
        raise ArchError("architecture needs 'input' and a non-empty 'layers' list")
    shape = tuple(int(s) for s in arch["input"])
    if any(s <= 0 for s in shape):
        raise ArchError(f"invalid input shape {shape}")
    layers: list[Layer] = []
    for i, spec in enumerate(arch["layers"]):
        kind = spec.get("kind")
        try:
            if kind == "conv":
                if spec["out"] <= 0 or spec["k"] <= 0:
                    raise ArchError("conv sizes must be positive")
                layer = Conv2D(shape[0], int(spec["out"]), int(spec["k"]), bool(spec.get("input_grad", True)))
            elif kind == "avgpool":
                layer = AvgPool2()
            elif kind == "batchnorm":
                layer = BatchNorm(shape[0], float(spec.get("momentum", 0.1)), float(spec.get("eps", 1e-5)))
            elif kind == "softplus":
                layer = Softplus()
            elif kind == "flatten":
                layer = Flatten()
            elif kind == "dense":
                if len(shape) != 1:
                    raise ArchError(f"dense after non-flat shape {shape}")
                if spec["out"] <= 0:
                    raise ArchError("dense size must be positive")
                layer = Dense(shape[0], int(spec["out"]))
            elif kind == "dropout":
                layer = Dropout(float(spec.get("p", 0.0)))
            elif kind == "grl":
                layer = GradientReversal(float(spec.get("lambda", 0.01)))
            else:
                raise ArchError(f"unknown layer kind {kind!r}")
            shape = layer.output_shape(shape)
        except (ArchError, LayerError, KeyError) as exc:
            errors.append(f"layer {i} ({kind}): {exc}")
            break
        layers.append(layer)
    if errors:
        raise ArchError("; ".join(errors))
    return Sequential(layers, arch)


def init_params(arch: dict, seed: int) -> Sequential:
    """Trunk weights ~ N(0, std^2) or Glorot-uniform per ``arch['init']``; biases zero."""
    net = build(arch)
    rng = np.random.default_rng(seed)
    scheme = arch.get("init", "normal")
    if scheme not in ("normal", "glorot"):
        raise ArchError(f"unknown init scheme {scheme!r}")
    std = float(arch.get("std", 0.05))
    for layer in net.layers:
        if "weight" not in layer.params:
            continue
        w = layer.params["weight"]
        if scheme == "normal":
            layer.params["weight"] = rng.normal(0.0, std, size=w.shape)
        else:
            if isinstance(layer, Dense):
                fan_in, fan_out = w.shape
            else:
                rf = w.shape[2] * w.shape[3]
                fan_in, fan_out = w.shape[1] * rf, w.shape[0] * rf
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layer.params["weight"] = rng.uniform(-limit, limit, size=w.shape)
        layer.params["bias"] = np.zeros_like(layer.params["bias"])
    return net


@dataclass
class SGD:
    """Classical momentum: ``v <- mu v - lr g``, ``p <- p + v``."""

    learning_rate: float = 1e-3
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def step(self, net: Sequential) -> None:
        for layer_i, layer in enumerate(net.layers):
            for key in layer.params:
                name = f"{layer_i}.{key}"
                layer.params[key] = sgd_step_array(layer.params[key], layer.grads[key], self.velocity, name,
                                                   self.learning_rate, self.momentum)


def sgd_step_array(p, g, velocity: dict, name: str, lr: float, momentum: float):
    v = velocity.get(name)
    v = -lr * g if v is None else momentum * v - lr * g
    velocity[name] = v
    return p + v


def sgd_step(params: dict, grads: dict, learning_rate: float, momentum: float = 0.0, velocity: dict | None = None) -> dict:
    """Functional form over name -> array dicts; ``velocity`` is updated in place."""
    velocity = {} if velocity is None else velocity
    if params.keys() != grads.keys():
        raise ArchError("gradient names do not match parameter names")
    out = {}
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise ArchError(f"{name}: gradient shape {np.shape(grads[name])} != {np.shape(p)}")
        out[name] = sgd_step_array(np.asarray(p, dtype=np.float64), grads[name], velocity, name, learning_rate, momentum)
    return out


# ---------------------------------------------------------------- weight file

def save_weights(path, trunk: Sequential, *, head: Sequential | None = None, mean_patch=None, extra: dict | None = None) -> None:
    """Magic, version, JSON header length, JSON header, then little-endian f64 arrays in header order."""
    arrays = []
    entries = []
    for prefix, net in (("trunk", trunk), ("head", head)):
        if net is None:
            continue
        for name, val in list(net.named_params()) + list(net.named_state()):
            entries.append({"name": f"{prefix}/{name}", "shape": list(val.shape)})
            arrays.append(val)
    if mean_patch is not None:
        mean_patch = np.asarray(mean_patch, dtype=np.float64)
        entries.append({"name": "mean_patch", "shape": list(mean_patch.shape)})
        arrays.append(mean_patch)
    header = {
        "trunk": trunk.arch,
        "head": None if head is None else head.arch,
        "n_features": int(trunk.layers[-1].params["bias"].shape[0]),
        "arrays": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


@dataclass
class WeightFile:
    trunk: Sequential
    head: Sequential | None
    mean_patch: np.ndarray | None
    n_features: int
    extra: dict


def load_weights(path) -> WeightFile:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ArchError(f"{path}: not a weight file")
    version, n = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ArchError(f"{path}: unsupported weight file version {version}")
    header = json.loads(data[12:12 + n])
    trunk = build(header["trunk"])
    head = build(header["head"]) if header["head"] else None
    offset = 12 + n
    mean = None
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
        prefix, _, name = entry["name"].partition("/")
        if prefix == "trunk":
            trunk.set_array(name, arr)
        elif prefix == "head":
            head.set_array(name, arr)
        else:
            mean = arr
    if offset != len(data):
        raise ArchError(f"{path}: {len(data) - offset} trailing bytes")
    return WeightFile(trunk, head, mean, int(header["n_features"]), header.get("extra", {}))
