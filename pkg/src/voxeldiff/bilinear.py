"""Bilinear sampling on 2-D feature maps, plus image resampling helpers.

Pixel (row i, col j) is centered at continuous coordinates (x=j, y=i).
Corners falling outside the map contribute zero (zero padding), so a
point more than one pixel outside samples to an exact zero vector.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor


def bilinear_weights(height, width, points, with_derivs=False):
    """4-corner flat indices and weights for (P, 2) points in (x, y) order."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError("points must be (P, 2)")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("non-finite point coordinates")
    x, y = pts[:, 0], pts[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0

    p = pts.shape[0]
    idx = np.zeros((p, 4), dtype=np.int64)
    w = np.empty((p, 4))
    dw = np.empty((p, 4, 2)) if with_derivs else None
    for corner in range(4):
        cx, cy = corner & 1, (corner >> 1) & 1
        xi, yi = x0 + cx, y0 + cy
        valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        wx = fx if cx else 1.0 - fx
        wy = fy if cy else 1.0 - fy
        idx[:, corner] = np.where(valid, yi * width + xi, 0)
        w[:, corner] = np.where(valid, wx * wy, 0.0)
        if with_derivs:
            sx = 1.0 if cx else -1.0
            sy = 1.0 if cy else -1.0
            dw[:, corner, 0] = np.where(valid, sx * wy, 0.0)
            dw[:, corner, 1] = np.where(valid, wx * sy, 0.0)
    if with_derivs:
        return idx, w, dw
    return idx, w


def bilinear_sample(feature_map, points):
    """Sample a (C, H, W) feature map at (P, 2) points -> (P, C), differentiable."""
    fmap = feature_map if isinstance(feature_map, Tensor) else Tensor(feature_map)
    if fmap.data.ndim != 3:
        raise ValidationError("bilinear_sample expects a (C, H, W) feature map")
    c, h, w = fmap.data.shape
    pts_t = points if isinstance(points, Tensor) else None
    pts = pts_t.data if pts_t is not None else points
    flat = T.reshape(fmap, (c, h * w))
    if pts_t is not None and pts_t.requires_grad:
        idx, wts, dw = bilinear_weights(h, w, pts, with_derivs=True)
        return T.weighted_gather(flat, idx, wts, points=pts_t, dweights_dpoints=dw)
    idx, wts = bilinear_weights(h, w, pts)
    return T.weighted_gather(flat, idx, wts)


def _resample_points(h_out, w_out, factor):
    i, j = np.mgrid[0:h_out, 0:w_out].astype(np.float64)
    x = (j + 0.5) / factor - 0.5
    y = (i + 0.5) / factor - 0.5
    return np.stack([x.ravel(), y.ravel()], axis=1)


def upsample_bilinear(image, factor=2):
    """(H, W, C) image -> (f*H, f*W, C) by bilinear resampling, differentiable.

    Source coordinates are clamped to the image so the result keeps the
    border values rather than fading to zero.
    """
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.data.ndim != 3:
        raise ValidationError("upsample_bilinear expects (H, W, C)")
    h, w, c = img.data.shape
    f = int(factor)
    pts = _resample_points(h * f, w * f, f)
    pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1.0)
    chw = T.permute(img, (2, 0, 1))
    sampled = bilinear_sample(chw, pts)  # (P, C)
    return T.reshape(sampled, (h * f, w * f, c))


def downsample_box(image: np.ndarray, factor=2) -> np.ndarray:
    """(H, W, C) -> (H/f, W/f, C) by block averaging (f must divide H and W)."""
    h, w, c = image.shape
    f = int(factor)
    if h % f or w % f:
        raise ValidationError("downsample_box: factor must divide image size")
    return image.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))
