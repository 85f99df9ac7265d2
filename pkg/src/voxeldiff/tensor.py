"""Dense float64 tensors with a reverse-mode autodiff tape.

Tensors wrap C-ordered float64 numpy arrays.  Each differentiable
primitive records its parent tensors and a closure that maps the output
adjoint to input adjoints; ``Tensor.backward`` replays the recorded tape
exactly once in reverse topological (creation) order.

There is no implicit broadcasting: binary operations take two tensors of
identical shape or one tensor and a python scalar.  Anything else needs
an explicit reshape / concat / add_bias / scale_rows, which keeps every
gradient rule auditable.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import NumericalError, ValidationError

_grad_enabled = True
_debug_checks = False
_ids = itertools.count()


def set_debug_checks(on: bool) -> None:
    """Toggle non-finite detection on every primitive output."""
    global _debug_checks
    _debug_checks = bool(on)


def debug_checks_enabled() -> bool:
    return _debug_checks


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure numpy forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _validate_finite(arr, what):
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


class Tensor:
    """A dense float64 array plus its position in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_nid")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _validate_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._nid = next(_ids)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError("item() on non-scalar tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    # -- backward ------------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients into ``.grad`` of every reachable leaf parameter."""
        if seed is None:
            if self.data.size != 1:
                raise ValidationError("backward() on a non-scalar output needs a seed gradient")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValidationError(
                    f"seed gradient shape {seed.shape} != output shape {self.data.shape}"
                )
        if not self.requires_grad:
            return
        order = _toposort(self)
        grads = {self._nid: seed}
        for node in reversed(order):
            g = grads.pop(node._nid, None)
            if g is None:
                continue
            if node._backward is None:
                # leaf parameter
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                acc = grads.get(parent._nid)
                grads[parent._nid] = pg if acc is None else acc + pg


def _toposort(root):
    order, visited = [], set()
    stack = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if node._nid in visited:
                continue
            visited.add(node._nid)
        if i < len(node._parents):
            stack.append((node, i + 1))
            stack.append((node._parents[i], 0))
        else:
            order.append(node)
    return order


def _node(data, parents, backward, what):
    """Build an op output; drops the tape when grads are off or unneeded."""
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    _validate_finite(arr, what)
    out.data = arr
    out.grad = None
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    out._nid = next(_ids)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValidationError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _scalar(x):
    return isinstance(x, (int, float, np.floating, np.integer))


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b):
    if _scalar(b):
        a = as_tensor(a)
        c = float(b)
        return _node(a.data + c, (a,), lambda g: ((a, g),), "add")
    if _scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)), "add")


def sub(a, b):
    if _scalar(b):
        return add(a, -float(b))
    if _scalar(a):
        b = as_tensor(b)
        c = float(a)
        return _node(c - b.data, (b,), lambda g: ((b, -g),), "sub")
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)), "sub")


def mul(a, b):
    if _scalar(b):
        a = as_tensor(a)
        c = float(b)
        return _node(a.data * c, (a,), lambda g: ((a, g * c),), "mul")
    if _scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: ((a, g * b.data), (b, g * a.data)),
        "mul",
    )


def square(a):
    return mul(a, a)


# -- activations ----------------------------------------------------------------


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0
    return _node(out, (a,), lambda g: ((a, np.where(mask, g, 0.0)),), "relu")


def sigmoid(a):
    a = as_tensor(a)
    s = expit(a.data)
    return _node(s, (a,), lambda g: ((a, g * s * (1.0 - s)),), "sigmoid")


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _node(out, (a,), lambda g: ((a, g * expit(a.data)),), "softplus")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: ((a, g * out),), "exp")


# -- reductions -------------------------------------------------------------------


def tensor_sum(a, axis=None):
    a = as_tensor(a)
    if axis is None:
        out = a.data.sum()

        def back(g):
            return ((a, np.full(a.data.shape, float(g))),)

        return _node(out, (a,), back, "sum")
    axis = int(axis)
    out = a.data.sum(axis=axis)

    def back_axis(g):
        return ((a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy()),)

    return _node(out, (a,), back_axis, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[int(axis)]
    return mul(tensor_sum(a, axis), 1.0 / n)


def cumsum(a, axis):
    a = as_tensor(a)
    axis = int(axis)
    out = np.cumsum(a.data, axis=axis)

    def back(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return ((a, rev),)

    return _node(out, (a,), back, "cumsum")


# -- shape manipulation -------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    orig = a.data.shape
    return _node(out, (a,), lambda g: ((a, g.reshape(orig)),), "reshape")


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    return _node(
        np.transpose(a.data, axes),
        (a,),
        lambda g: ((a, np.ascontiguousarray(np.transpose(g, inv))),),
        "permute",
    )


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValidationError("concat of zero tensors")
    axis = int(axis)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            grads.append((t, np.ascontiguousarray(g[tuple(sl)])))
        return grads

    return _node(out, tuple(tensors), back, "concat")


def narrow(a, axis, start, length):
    a = as_tensor(a)
    axis, start, length = int(axis), int(start), int(length)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ValidationError("narrow out of range")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def back(g):
        full = np.zeros(a.data.shape)
        full[sl] = g
        return ((a, full),)

    return _node(out, (a,), back, "narrow")


# -- linear algebra and structured ops ------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValidationError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValidationError(f"matmul: inner dims {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _node(out, (a, b), back, "matmul")


def add_bias(a, b, axis):
    """a + b broadcast along one axis; b is 1-D with len == a.shape[axis]."""
    a, b = as_tensor(a), as_tensor(b)
    axis = int(axis) % a.data.ndim
    if b.data.ndim != 1 or b.data.shape[0] != a.data.shape[axis]:
        raise ValidationError(f"add_bias: bias {b.data.shape} vs axis {axis} of {a.data.shape}")
    shape = [1] * a.data.ndim
    shape[axis] = b.data.shape[0]
    out = a.data + b.data.reshape(shape)
    other_axes = tuple(i for i in range(a.data.ndim) if i != axis)

    def back(g):
        return ((a, g), (b, g.sum(axis=other_axes)))

    return _node(out, (a, b), back, "add_bias")


def scale_rows(a, s):
    """Multiply each row of a (N, C) tensor by a per-row factor s (N,)."""
    a, s = as_tensor(a), as_tensor(s)
    if a.data.ndim != 2 or s.data.shape != (a.data.shape[0],):
        raise ValidationError(f"scale_rows: {a.data.shape} rows vs factors {s.data.shape}")
    col = s.data[:, None]
    out = a.data * col

    def back(g):
        return ((a, g * col), (s, (g * a.data).sum(axis=1)))

    return _node(out, (a, s), back, "scale_rows")


def weighted_gather(values, idx, weights, points=None, dweights_dpoints=None):
    """Weighted corner gather: out[p, c] = sum_k w[p, k] * values[c, idx[p, k]].

    ``values`` is a (C, M) tensor; ``idx``/``weights`` are constant (P, K)
    arrays.  When the sampling locations themselves need gradients, pass
    ``points`` (a (P, D) tensor) together with ``dweights_dpoints`` of
    shape (P, K, D); the adjoint then chains corner-weight gradients back
    to the points analytically.
    """
    values = as_tensor(values)
    if values.data.ndim != 2:
        raise ValidationError("weighted_gather expects (C, M) values")
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    out = kernels.gather(values.data, idx, weights)
    table_size = values.data.shape[1]
    parents = [values]
    if points is not None and isinstance(points, Tensor) and points.requires_grad:
        if dweights_dpoints is None:
            raise ValidationError("points gradient requested without dweights_dpoints")
        parents.append(points)

    def back(g):
        g = np.ascontiguousarray(g)
        grads = [(values, kernels.scatter(g, idx, weights, table_size))]
        if len(parents) == 2:
            gw = kernels.gather_dot(values.data, idx, g)
            gp = np.einsum("pk,pkd->pd", gw, dweights_dpoints)
            grads.append((points, gp))
        return grads

    return _node(out, tuple(parents), back, "weighted_gather")
