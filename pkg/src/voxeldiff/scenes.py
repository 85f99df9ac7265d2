"""Synthetic blob scenes: an analytic stand-in for real multi-view captures.

A scene is a handful of colored Gaussian density blobs inside the unit
cube.  Density and color are evaluated analytically on a grid whose
channels are (density, r, g, b); the identity decoder renders it with the
reference renderer, giving exact ground truth for recovery experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .field import AnalyticDecoder, VoxelGrid
from .render import Camera, RenderConfig, render
from .tensor import Tensor
from .unproject import PosedImage


@dataclass
class Blob:
    center: tuple
    radius: float
    peak: float
    rgb: tuple

    def __post_init__(self):
        if self.radius <= 0 or self.peak < 0:
            raise ValidationError("blob needs positive radius and non-negative peak")


@dataclass
class SceneSpec:
    blobs: list
    grid_resolution: int = 32
    camera_count: int = 24
    camera_radius: float = 2.8
    camera_elevation_deg: float = 0.0
    image_size: int = 64
    fov_y_deg: float = 45.0
    samples_per_ray: int = 64
    extent: tuple = (-1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.extent
        for blob in self.blobs:
            if any(not lo <= c <= hi for c in blob.center):
                raise ValidationError("blob center outside the extent")


def blob_fields(blobs, points: np.ndarray):
    """Analytic density and color at world points: (P,), (P, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    density = np.zeros(pts.shape[0])
    color_acc = np.zeros((pts.shape[0], 3))
    for blob in blobs:
        d2 = ((pts - np.asarray(blob.center)) ** 2).sum(axis=1)
        contrib = blob.peak * np.exp(-0.5 * d2 / blob.radius**2)
        density += contrib
        color_acc += contrib[:, None] * np.asarray(blob.rgb, dtype=np.float64)
    color = np.where(density[:, None] > 1e-12, color_acc / np.maximum(density, 1e-12)[:, None], 0.0)
    return density, np.clip(color, 0.0, 1.0)


def ring_cameras(count, radius, elevation_deg, image_size, fov_y_deg=45.0,
                 azimuth_offset=0.0, near=None, far=None):
    """Cameras on a circle around the origin at fixed elevation, +z up."""
    if count < 1:
        raise ValidationError("need at least one camera")
    el = math.radians(elevation_deg)
    span = math.sqrt(3.0)  # extent cube diagonal half-length for [-1,1]^3
    near = near if near is not None else max(radius - span, 0.05)
    far = far if far is not None else radius + span
    cams = []
    for i in range(count):
        az = 2.0 * math.pi * i / count + azimuth_offset
        eye = (
            radius * math.cos(el) * math.cos(az),
            radius * math.cos(el) * math.sin(az),
            radius * math.sin(el),
        )
        cams.append(
            Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), fov_y_deg,
                           image_size, image_size, near, far)
        )
    return cams


def random_scene_spec(seed, n_blobs=3, **overrides) -> SceneSpec:
    """A reproducible random blob arrangement."""
    rng = np.random.default_rng(seed)
    blobs = []
    for _ in range(n_blobs):
        center = tuple(rng.uniform(-0.45, 0.45, size=3))
        radius = float(rng.uniform(0.22, 0.4))
        peak = float(rng.uniform(8.0, 16.0))
        rgb = tuple(np.clip(rng.uniform(0.2, 1.0, size=3), 0.0, 1.0))
        blobs.append(Blob(center, radius, peak, rgb))
    return SceneSpec(blobs=blobs, seed=seed, **overrides)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    grid: VoxelGrid  # (density, r, g, b) channels
    decoder: AnalyticDecoder
    frames: list  # PosedImage


def bake_grid(spec: SceneSpec) -> VoxelGrid:
    """Evaluate the blob fields on the lattice into a 4-channel grid."""
    grid = VoxelGrid.zeros(spec.grid_resolution, 4, spec.extent)
    pts = grid.vertex_positions()
    density, color = blob_fields(spec.blobs, pts)
    s = spec.grid_resolution
    vol = np.concatenate([density[:, None], color], axis=1).T.reshape(4, s, s, s)
    return VoxelGrid(spec.grid_resolution, 4, Tensor(vol.copy()), spec.extent)


def gen_synthetic_scene(spec: SceneSpec, cameras=None) -> SyntheticScene:
    """Bake the ground-truth grid and render posed images from a camera ring."""
    grid = bake_grid(spec)
    decoder = AnalyticDecoder()
    if cameras is None:
        cameras = ring_cameras(
            spec.camera_count, spec.camera_radius, spec.camera_elevation_deg,
            spec.image_size, spec.fov_y_deg,
        )
    cfg = RenderConfig(samples_per_ray=spec.samples_per_ray)
    frames = [PosedImage(render(grid, decoder, cam, cfg).image.copy(), cam) for cam in cameras]
    return SyntheticScene(spec=spec, grid=grid, decoder=decoder, frames=frames)
