"""Pool posed 2-D image features into a conditioning feature volume.

Every grid vertex is projected into every frame; its bilinearly sampled
encoder feature, concatenated with the per-vertex view direction, runs
through the accumulator MLP which emits a non-negative weight and a
transformed feature.  The pooled volume is the plain weighted sum over
frames (no cross-frame normalization).  Contributions from vertices that
project behind the camera or outside the image are zeroed outright, so a
vertex seen by no frame pools to an exact zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .bilinear import bilinear_sample
from .errors import ValidationError
from .field import VoxelGrid
from .render import Camera
from .tensor import Tensor


@dataclass
class PosedImage:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera: Camera

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError("PosedImage expects an (H, W, 3) image")
        if not np.all(np.isfinite(self.image)):
            raise ValidationError("non-finite image")


class Encoder2D:
    """Three strided conv layers mapping an RGB image to a d-channel map.

    Output stride is 4 (two stride-2 layers), trained jointly with the
    rest of the pipeline.
    """

    stride = 4

    def __init__(self, out_channels, rng, widths=(8, 12)):
        c1, c2 = widths
        self.conv1 = nn.Conv2d(3, c1, rng, stride=2)
        self.conv2 = nn.Conv2d(c1, c2, rng, stride=2)
        self.conv3 = nn.Conv2d(c2, out_channels, rng, stride=1)
        self.out_channels = out_channels
        self.widths = tuple(widths)

    def __call__(self, image):
        """(H, W, 3) image (array or tensor) -> (d, H/4, W/4) feature map."""
        img = image if isinstance(image, Tensor) else Tensor(image)
        x = T.permute(img, (2, 0, 1))
        x = T.relu(self.conv1(x))
        x = T.relu(self.conv2(x))
        return self.conv3(x)

    def parameters(self):
        return nn.collect({"conv1": self.conv1, "conv2": self.conv2, "conv3": self.conv3})


class Accumulator:
    """MLP mapping [feature; view direction] -> (softplus weight, new feature)."""

    def __init__(self, channels, rng, hidden=32):
        self.channels = channels
        self.hidden = hidden
        self.mlp = nn.MLP([channels + 3, hidden, 1 + channels], rng)

    def __call__(self, features: Tensor, view_dirs: np.ndarray):
        """(P, d) features + (P, 3) dirs -> (weights (P,), transformed (P, d))."""
        if features.data.shape[1] != self.channels:
            raise ValidationError("accumulator feature width mismatch")
        inp = T.concat([features, Tensor(view_dirs)], axis=1)
        out = self.mlp(inp)
        weight = T.softplus(T.reshape(T.narrow(out, 1, 0, 1), (features.data.shape[0],)))
        transformed = T.narrow(out, 1, 1, self.channels)
        return weight, transformed

    def parameters(self):
        return nn.collect({"mlp": self.mlp})


def encode_frames(encoder: Encoder2D, images):
    """Encode a list of same-sized images into per-frame feature maps."""
    maps = []
    shape = None
    for img in images:
        arr = img.image if isinstance(img, PosedImage) else np.asarray(img)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValidationError("encode_frames: images must share dimensions")
        maps.append(encoder(arr))
    return maps


def _feature_coords(camera: Camera, points: np.ndarray, stride: int):
    """Project points and convert pixel coords to feature-map coords."""
    pix, inside = camera.project(points)
    fx = (pix[:, 0] + 0.5) / stride - 0.5
    fy = (pix[:, 1] + 0.5) / stride - 0.5
    return np.stack([fx, fy], axis=1), inside


def unproject(feature_maps, cameras, grid_spec: VoxelGrid, accumulator: Accumulator,
              stride: int = Encoder2D.stride) -> Tensor:
    """Pool per-frame feature maps into a (d, S, S, S) conditioning volume.

    ``grid_spec`` supplies the lattice geometry; the returned tensor is on
    the tape (gradients flow into the maps and the accumulator).  An empty
    frame list returns an all-zero volume.
    """
    if len(feature_maps) != len(cameras):
        raise ValidationError("feature map / camera count mismatch")
    s = grid_spec.resolution
    d = accumulator.channels
    if not feature_maps:
        return Tensor(np.zeros((d, s, s, s)))
    verts = grid_spec.vertex_positions()  # (S^3, 3) in (z, y, x) raster order
    pooled = None
    for fmap, camera in zip(feature_maps, cameras):
        if fmap.data.shape[0] != d:
            raise ValidationError("feature map channel count != accumulator channels")
        coords, inside = _feature_coords(camera, verts, stride)
        coords = np.where(inside[:, None], coords, 0.0)
        feats = bilinear_sample(fmap, coords)
        dirs = camera.view_directions(verts)
        weight, transformed = accumulator(feats, dirs)
        contrib = T.scale_rows(transformed, T.mul(weight, Tensor(inside.astype(np.float64))))
        pooled = contrib if pooled is None else T.add(pooled, contrib)
    vol = T.permute(pooled, (1, 0))  # (d, S^3)
    return T.reshape(vol, (d, s, s, s))
