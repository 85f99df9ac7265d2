"""Weighted gather/scatter kernels with a compiled core and a numpy fallback.

Trilinear (K=8 corners) and bilinear (K=4) interpolation both reduce to
the same three primitives on a flat value table ``values`` of shape
(channels, table_size):

- ``gather(values, idx, w)``        -> per-point weighted corner sums
- ``scatter(grad, idx, w, m)``      -> the adjoint: accumulate into the table
- ``gather_dot(values, idx, grad)`` -> per-corner dot products (weight grads)

These are the hot inner loops of rendering and unprojection.  A Cython
extension (``_native``) is selected at import when available; setting the
environment variable ``VOXELDIFF_NO_NATIVE=1`` forces the numpy/scipy
fallback (used by the benchmark as the baseline).  Both backends are
deterministic: reductions run in a fixed order.
"""

import os

import numpy as np

from ..errors import ValidationError

if os.environ.get("VOXELDIFF_NO_NATIVE"):
    from . import _numpy as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _native as _impl

        BACKEND = "native"
    except ImportError:  # extension not built
        from . import _numpy as _impl

        BACKEND = "numpy"


def _check(values, idx, weights):
    values = np.ascontiguousarray(values, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if values.ndim != 2 or idx.ndim != 2 or weights.ndim != 2:
        raise ValidationError("kernels expect 2-D values, idx, weights")
    if idx.shape != weights.shape:
        raise ValidationError(f"idx {idx.shape} and weights {weights.shape} differ")
    if idx.size and (idx.min() < 0 or idx.max() >= values.shape[1]):
        raise ValidationError("gather index out of range")
    return values, idx, weights


def gather(values, idx, weights):
    """out[p, c] = sum_k weights[p, k] * values[c, idx[p, k]]."""
    values, idx, weights = _check(values, idx, weights)
    return _impl.gather(values, idx, weights)


def scatter(grad_out, idx, weights, table_size):
    """Adjoint of gather: out[c, m] = sum over (p, k) with idx[p,k]==m of w*grad."""
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if idx.shape != weights.shape or grad_out.shape[0] != idx.shape[0]:
        raise ValidationError("scatter shape mismatch")
    if idx.size and (idx.min() < 0 or idx.max() >= table_size):
        raise ValidationError("scatter index out of range")
    return _impl.scatter(grad_out, idx, weights, int(table_size))


def gather_dot(values, idx, grad_out):
    """out[p, k] = dot(grad_out[p, :], values[:, idx[p, k]])."""
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    values, idx, _w = _check(values, idx, np.zeros_like(idx, dtype=np.float64))
    if grad_out.shape != (idx.shape[0], values.shape[0]):
        raise ValidationError("gather_dot shape mismatch")
    return _impl.gather_dot(values, idx, grad_out)
