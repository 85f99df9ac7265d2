"""Adam optimizer: a pure functional step plus a stateful wrapper."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators and the step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Returns (new params dict, state).

    ``params`` and ``grads`` are dicts of equally shaped float64 arrays.
    The state is updated in place; parameter arrays are replaced.
    """
    if state.lr < 0:
        raise ValidationError("adam_step: negative learning rate")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValidationError(f"adam_step: gradient shape mismatch for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state


class Adam:
    """In-place Adam over a dict of named parameter tensors."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        for t in self.params.values():
            if not isinstance(t, Tensor):
                raise ValidationError("Adam expects Tensor parameters")
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self):
        values = {k: t.data for k, t in self.params.items()}
        grads = {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.params.items()
        }
        new_values, _ = adam_step(values, grads, self.state)
        for k, t in self.params.items():
            t.data = np.ascontiguousarray(new_values[k])
