"""Feature voxel grid with differentiable trilinear sampling and decoders.

Lattice registration: vertex i of an S-grid sits at lo + i/(S-1)*(hi-lo)
per axis, boundary inclusive.  Features are stored (channel, z, y, x);
the flat index of vertex (x, y, z) in channel c is ((c*S + z)*S + y)*S + x,
matching the on-disk layout.  Points outside the extent sample to an
exact zero feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor, as_tensor


@dataclass
class VoxelGrid:
    resolution: int
    channels: int
    features: Tensor
    extent: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.resolution < 2:
            raise ValidationError("grid resolution must be >= 2")
        if not isinstance(self.features, Tensor):
            self.features = Tensor(self.features)
        s, d = self.resolution, self.channels
        if self.features.data.shape != (d, s, s, s):
            raise ValidationError(
                f"feature shape {self.features.data.shape} != ({d},{s},{s},{s})"
            )
        lo, hi = self.extent
        if not hi > lo:
            raise ValidationError("extent must have positive side length")

    @classmethod
    def zeros(cls, resolution, channels, extent=(-1.0, 1.0)):
        s = resolution
        return cls(resolution, channels, Tensor(np.zeros((channels, s, s, s))), extent)

    def vertex_positions(self) -> np.ndarray:
        """World positions of all S^3 vertices, ordered (z, y, x) row-major."""
        lo, hi = self.extent
        s = self.resolution
        axis = lo + (hi - lo) * np.arange(s) / (s - 1)
        zz, yy, xx = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def flat_features(self) -> Tensor:
        """(channels, S^3) view of the feature tensor, on the tape."""
        s = self.resolution
        return T.reshape(self.features, (self.channels, s * s * s))


def trilinear_weights(grid: VoxelGrid, points: np.ndarray, with_derivs=False):
    """Corner indices and weights for each query point.

    Returns (idx (P,8) int64 flat vertex indices, w (P,8)) and, when
    ``with_derivs`` is set, dw/dp of shape (P,8,3).  Points outside the
    extent get all-zero weights (and zero derivatives).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError("points must be (P, 3)")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("non-finite point coordinates")
    s = grid.resolution
    lo, hi = grid.extent
    scale = (s - 1) / (hi - lo)
    u = (pts - lo) * scale  # continuous lattice coordinates, x/y/z columns
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)

    i0 = np.clip(np.floor(u).astype(np.int64), 0, s - 2)
    f = u - i0

    p = pts.shape[0]
    idx = np.empty((p, 8), dtype=np.int64)
    w = np.empty((p, 8))
    dw = np.empty((p, 8, 3)) if with_derivs else None
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    for corner in range(8):
        cx, cy, cz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
        wx = fx if cx else 1.0 - fx
        wy = fy if cy else 1.0 - fy
        wz = fz if cz else 1.0 - fz
        idx[:, corner] = ((iz + cz) * s + (iy + cy)) * s + (ix + cx)
        w[:, corner] = wx * wy * wz
        if with_derivs:
            sx = scale if cx else -scale
            sy = scale if cy else -scale
            sz = scale if cz else -scale
            dw[:, corner, 0] = sx * wy * wz
            dw[:, corner, 1] = wx * sy * wz
            dw[:, corner, 2] = wx * wy * sz
    w[~inside] = 0.0
    if with_derivs:
        dw[~inside] = 0.0
        return idx, w, dw
    return idx, w


def trilinear_sample(grid: VoxelGrid, points):
    """Sample d-channel features at world points; (P, d) output.

    Differentiable w.r.t. the grid features, and w.r.t. the points when
    they are a Tensor with requires_grad.
    """
    pts_t = points if isinstance(points, Tensor) else None
    pts = pts_t.data if pts_t is not None else points
    if pts_t is not None and pts_t.requires_grad:
        idx, w, dw = trilinear_weights(grid, pts, with_derivs=True)
        return T.weighted_gather(grid.flat_features(), idx, w, points=pts_t, dweights_dpoints=dw)
    idx, w = trilinear_weights(grid, pts)
    return T.weighted_gather(grid.flat_features(), idx, w)


def upsample_grid(grid: VoxelGrid, resolution: int) -> VoxelGrid:
    """Trilinearly resample the field onto a finer lattice (same extent)."""
    if resolution <= grid.resolution:
        raise ValidationError("upsample_grid needs a strictly finer resolution")
    fine = VoxelGrid.zeros(resolution, grid.channels, grid.extent)
    pts = fine.vertex_positions()
    with T.no_grad():
        feats = trilinear_sample(grid, pts).data  # (S'^3, d) in (z,y,x) order
    s = resolution
    vol = feats.T.reshape(grid.channels, s, s, s)
    return VoxelGrid(resolution, grid.channels, Tensor(vol.copy()), grid.extent)


class FieldDecoder:
    """MLP from grid features to (density, color): softplus and sigmoid heads."""

    def __init__(self, channels, hidden=(32,), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.hidden = tuple(hidden)
        self.mlp = nn.MLP([channels, *self.hidden, 4], rng)

    def decode(self, features: Tensor):
        """(P, d) features -> density (P, 1) >= 0 and color (P, 3) in (0,1)."""
        if features.data.ndim != 2 or features.data.shape[1] != self.channels:
            raise ValidationError(
                f"decode: features {features.data.shape} vs channels {self.channels}"
            )
        raw = self.mlp(features)
        density = T.softplus(T.narrow(raw, 1, 0, 1))
        color = T.sigmoid(T.narrow(raw, 1, 1, 3))
        return density, color

    def parameters(self):
        return nn.collect({"mlp": self.mlp})

    def clone(self) -> "FieldDecoder":
        other = FieldDecoder(self.channels, self.hidden)
        nn.load_parameters(other.parameters(), {k: v.data.copy() for k, v in self.parameters().items()})
        return other


class AnalyticDecoder:
    """Identity decoder for oracle grids storing (density, r, g, b) channels."""

    channels = 4

    def decode(self, features: Tensor):
        if features.data.ndim != 2 or features.data.shape[1] != 4:
            raise ValidationError("AnalyticDecoder expects (P, 4) features")
        density = T.relu(T.narrow(features, 1, 0, 1))
        color = T.narrow(features, 1, 1, 3)
        return density, color

    def parameters(self):
        return {}


def decode(decoder, features) -> tuple:
    """Module-level convenience wrapper around decoder.decode."""
    return decoder.decode(as_tensor(features) if not isinstance(features, Tensor) else features)
