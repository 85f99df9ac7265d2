"""2-D/3-D convolution and nearest upsampling primitives.

Convolutions use small odd kernels with 'same' zero padding and an
optional integer stride.  Forward lowers to im2col plus one BLAS matmul;
the backward pass reuses the column matrix for the weight gradient and
scatters the input gradient back through the same window slices.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .tensor import _node, as_tensor


def _out_len(n, k, stride):
    pad = k // 2
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, stride=1):
    """x: (Ci, H, W), w: (Co, Ci, k, k) -> (Co, Ho, Wo), zero 'same' padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValidationError("conv2d expects (Ci,H,W) input and (Co,Ci,k,k) weights")
    ci, h, wd = x.data.shape
    co, ci_w, k, k2 = w.data.shape
    if ci != ci_w or k != k2 or k % 2 != 1:
        raise ValidationError(f"conv2d: weights {w.data.shape} vs input {x.data.shape}")
    s = int(stride)
    pad = k // 2
    ho, wo = _out_len(h, k, s), _out_len(wd, k, s)
    n = ho * wo
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))

    kk = k * k
    col = np.empty((ci, kk, n))
    for dy in range(k):
        for dx in range(k):
            win = xp[:, dy : dy + s * (ho - 1) + 1 : s, dx : dx + s * (wo - 1) + 1 : s]
            col[:, dy * k + dx, :] = win.reshape(ci, n)
    wm = w.data.reshape(co, ci * kk)
    out = (wm @ col.reshape(ci * kk, n)).reshape(co, ho, wo)

    def back(g):
        gm = g.reshape(co, n)
        gw = (gm @ col.reshape(ci * kk, n).T).reshape(w.data.shape)
        gcol = (wm.T @ gm).reshape(ci, kk, n)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[:, dy : dy + s * (ho - 1) + 1 : s, dx : dx + s * (wo - 1) + 1 : s] += (
                    gcol[:, dy * k + dx, :].reshape(ci, ho, wo)
                )
        gx = gxp[:, pad : pad + h, pad : pad + wd]
        return ((x, np.ascontiguousarray(gx)), (w, gw))

    return _node(out, (x, w), back, "conv2d")


def conv3d(x, w, stride=1):
    """x: (Ci, D, H, W), w: (Co, Ci, k, k, k) -> (Co, Do, Ho, Wo)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ValidationError("conv3d expects (Ci,D,H,W) input and (Co,Ci,k,k,k) weights")
    ci, d, h, wd = x.data.shape
    co, ci_w, k, k2, k3 = w.data.shape
    if ci != ci_w or not (k == k2 == k3) or k % 2 != 1:
        raise ValidationError(f"conv3d: weights {w.data.shape} vs input {x.data.shape}")
    s = int(stride)
    pad = k // 2
    do, ho, wo = _out_len(d, k, s), _out_len(h, k, s), _out_len(wd, k, s)
    n = do * ho * wo
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))

    kkk = k * k * k
    col = np.empty((ci, kkk, n))
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                win = xp[
                    :,
                    dz : dz + s * (do - 1) + 1 : s,
                    dy : dy + s * (ho - 1) + 1 : s,
                    dx : dx + s * (wo - 1) + 1 : s,
                ]
                col[:, (dz * k + dy) * k + dx, :] = win.reshape(ci, n)
    wm = w.data.reshape(co, ci * kkk)
    out = (wm @ col.reshape(ci * kkk, n)).reshape(co, do, ho, wo)

    def back(g):
        gm = g.reshape(co, n)
        gw = (gm @ col.reshape(ci * kkk, n).T).reshape(w.data.shape)
        gcol = (wm.T @ gm).reshape(ci, kkk, n)
        gxp = np.zeros_like(xp)
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    gxp[
                        :,
                        dz : dz + s * (do - 1) + 1 : s,
                        dy : dy + s * (ho - 1) + 1 : s,
                        dx : dx + s * (wo - 1) + 1 : s,
                    ] += gcol[:, (dz * k + dy) * k + dx, :].reshape(ci, do, ho, wo)
        gx = gxp[:, pad : pad + d, pad : pad + h, pad : pad + wd]
        return ((x, np.ascontiguousarray(gx)), (w, gw))

    return _node(out, (x, w), back, "conv3d")


def upsample2d_nearest(x, factor=2):
    """(C, H, W) -> (C, f*H, f*W) by repetition; adjoint is block summation."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ValidationError("upsample2d_nearest expects (C,H,W)")
    f = int(factor)
    c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)

    def back(g):
        return ((x, g.reshape(c, h, f, w, f).sum(axis=(2, 4))),)

    return _node(out, (x,), back, "upsample2d_nearest")


def upsample3d_nearest(x, factor=2):
    """(C, D, H, W) -> (C, f*D, f*H, f*W) by repetition."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValidationError("upsample3d_nearest expects (C,D,H,W)")
    f = int(factor)
    c, d, h, w = x.data.shape
    out = np.repeat(np.repeat(np.repeat(x.data, f, axis=1), f, axis=2), f, axis=3)

    def back(g):
        return ((x, g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6))),)

    return _node(out, (x,), back, "upsample3d_nearest")
