"""Small neural building blocks on top of the tensor primitives."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .conv import conv2d, conv3d
from .errors import ValidationError
from .tensor import Tensor


def _init(rng, shape, fan_in):
    return rng.standard_normal(shape) / math.sqrt(fan_in)


class Linear:
    def __init__(self, fan_in, fan_out, rng):
        self.w = Tensor(_init(rng, (fan_in, fan_out), fan_in), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x):
        return T.add_bias(T.matmul(x, self.w), self.b, axis=1)

    def parameters(self):
        return {"w": self.w, "b": self.b}


class Conv2d:
    def __init__(self, fan_in, fan_out, rng, kernel=3, stride=1):
        self.stride = stride
        self.w = Tensor(
            _init(rng, (fan_out, fan_in, kernel, kernel), fan_in * kernel * kernel),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x):
        return T.add_bias(conv2d(x, self.w, stride=self.stride), self.b, axis=0)

    def parameters(self):
        return {"w": self.w, "b": self.b}


class Conv3d:
    def __init__(self, fan_in, fan_out, rng, kernel=3, stride=1):
        self.stride = stride
        self.w = Tensor(
            _init(rng, (fan_out, fan_in, kernel, kernel, kernel), fan_in * kernel**3),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x):
        return T.add_bias(conv3d(x, self.w, stride=self.stride), self.b, axis=0)

    def parameters(self):
        return {"w": self.w, "b": self.b}


class MLP:
    """Fully connected stack with ReLU between hidden layers, linear output."""

    def __init__(self, widths, rng):
        if len(widths) < 2:
            raise ValidationError("MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        return self.layers[-1](x)

    def parameters(self):
        return collect({f"layer{i}": l for i, l in enumerate(self.layers)})


def collect(children: dict) -> dict:
    """Flatten child parameter dicts into dotted names (None children skipped)."""
    out = {}
    for prefix, child in children.items():
        if child is None:
            continue
        params = child.parameters() if hasattr(child, "parameters") else child
        for name, t in params.items():
            out[f"{prefix}.{name}"] = t
    return out


def load_parameters(params: dict, values: dict) -> None:
    """Copy arrays into an existing parameter dict (shapes must match)."""
    missing = set(params) - set(values)
    if missing:
        raise ValidationError(f"missing parameters: {sorted(missing)[:4]}...")
    for name, t in params.items():
        arr = np.ascontiguousarray(values[name], dtype=np.float64)
        if arr.shape != t.data.shape:
            raise ValidationError(f"parameter shape mismatch for {name}")
        t.data = arr


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of an integer timestep, length ``dim``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return emb
