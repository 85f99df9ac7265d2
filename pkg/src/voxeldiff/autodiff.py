"""Graph-level evaluation, backward, and finite-difference verification.

A ComputeGraph wraps a python function that builds the op tape eagerly
from named parameter and input tensors.  Running ``forward_eval`` caches
every node's output on the tape; ``backward`` replays it once in reverse
and returns one gradient array per parameter leaf.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .tensor import Tensor


class ComputeGraph:
    """One differentiable function of named parameters and named inputs.

    ``fn(params, inputs)`` receives two dicts of tensors and returns a
    Tensor or a dict of tensors.  Parameters are the gradient leaves.
    """

    def __init__(self, fn, params):
        self.fn = fn
        self.params = {}
        for name, value in params.items():
            t = value if isinstance(value, Tensor) else Tensor(value)
            t.requires_grad = True
            t.name = name
            self.params[name] = t
        self._outputs = None

    def forward_eval(self, inputs=None):
        """Run the forward pass; caches outputs for the backward pass."""
        bound = {}
        for name, value in (inputs or {}).items():
            bound[name] = value if isinstance(value, Tensor) else Tensor(value)
        out = self.fn(self.params, bound)
        self._outputs = out if isinstance(out, dict) else {"output": out}
        return self._outputs

    def output(self, name="output") -> Tensor:
        if self._outputs is None:
            raise ValidationError("backward before forward_eval")
        return self._outputs[name]

    def backward(self, seed=None, output="output"):
        """Seed the cached output and return {param name: gradient array}."""
        out = self.output(output)
        for p in self.params.values():
            p.zero_grad()
        out.backward(seed)
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }


def forward_eval(graph: ComputeGraph, inputs=None):
    return graph.forward_eval(inputs)


def backward(graph: ComputeGraph, seed=None):
    return graph.backward(seed)


def grad_check(graph: ComputeGraph, point=None, inputs=None, step=1e-5):
    """Max relative error between analytic gradients and central differences.

    The graph output must be scalar.  ``point`` optionally rebinds
    parameter values before checking.  Error metric per entry:
    |analytic - fd| / max(1, |analytic|, |fd|).
    """
    if point:
        for name, value in point.items():
            arr = np.ascontiguousarray(value, dtype=np.float64)
            if arr.shape != graph.params[name].data.shape:
                raise ValidationError(f"grad_check point shape mismatch for {name}")
            graph.params[name].data = arr

    graph.forward_eval(inputs)
    out = graph.output()
    if out.data.size != 1:
        raise ValidationError("grad_check needs a scalar graph output")
    analytic = graph.backward()

    worst = 0.0
    for name, p in graph.params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = graph.forward_eval(inputs)["output"].item()
            flat[i] = orig - step
            lo = graph.forward_eval(inputs)["output"].item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            err = abs(ga[i] - fd) / max(1.0, abs(ga[i]), abs(fd))
            worst = max(worst, err)
    graph.forward_eval(inputs)
    return worst


def finite_difference(f, x, step=1e-5):
    """Central-difference gradient of a scalar function of one array."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g
