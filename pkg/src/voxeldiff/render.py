"""Differentiable emission-absorption volume renderer and image metrics.

Cameras are 4x4 world-to-clip matrices in row-vector convention
(clip = [p 1] @ matrix); z maps to NDC [-1, 1] between near and far.
Rays march uniformly between the entry and exit of the grid extent,
composited front to back: with optical step a_i = sigma_i * delta_i,
transmittance T_i = exp(-sum_{j<i} a_j), weight w_i = T_i (1 - exp(-a_i)),
pixel = sum_i w_i c_i + T_final * background.  Weights and the residual
transmittance always sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .field import VoxelGrid, trilinear_sample
from .tensor import Tensor


@dataclass
class Camera:
    matrix: np.ndarray  # 4x4 world -> clip, row-vector convention
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (4, 4):
            raise ValidationError("camera matrix must be 4x4")
        if not (self.near < self.far):
            raise ValidationError("camera needs near < far")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be >= 1")

    @classmethod
    def look_at(cls, eye, target, up, fov_y_deg, width, height, near, far):
        """Pinhole camera at ``eye`` looking at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        upv = np.cross(right, fwd)
        basis = np.stack([right, upv, -fwd], axis=1)  # world -> camera columns
        view = np.eye(4)
        view[:3, :3] = basis
        view[3, :3] = -eye @ basis

        aspect = width / height
        f = 1.0 / math.tan(math.radians(fov_y_deg) / 2.0)
        proj = np.zeros((4, 4))
        proj[0, 0] = f / aspect
        proj[1, 1] = f
        proj[2, 2] = (far + near) / (near - far)
        proj[3, 2] = 2.0 * far * near / (near - far)
        proj[2, 3] = -1.0
        return cls(view @ proj, width, height, near, far)

    @classmethod
    def orthographic(cls, width, height, near=-1.0, far=1.0, extent=1.0):
        """Axis-aligned camera looking down -z over [-extent, extent]^2."""
        m = np.eye(4)
        m[0, 0] = 1.0 / extent
        m[1, 1] = 1.0 / extent
        m[2, 2] = -2.0 / (far - near)
        m[3, 2] = -(far + near) / (far - near)
        return cls(m, width, height, near, far)

    def pixel_ndc(self) -> np.ndarray:
        """(H*W, 2) NDC coordinates of all pixel centers, row-major."""
        i, j = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        x = (j + 0.5) / self.width * 2.0 - 1.0
        y = 1.0 - (i + 0.5) / self.height * 2.0
        return np.stack([x.ravel(), y.ravel()], axis=1)

    def unproject(self, ndc_xy: np.ndarray, z_ndc: float) -> np.ndarray:
        """Map NDC points at a fixed NDC depth back to world space."""
        try:
            inv = np.linalg.inv(self.matrix)
        except np.linalg.LinAlgError as e:
            raise ValidationError("singular camera projection") from e
        n = ndc_xy.shape[0]
        clip = np.concatenate(
            [ndc_xy, np.full((n, 1), z_ndc), np.ones((n, 1))], axis=1
        )
        world = clip @ inv
        wcol = world[:, 3:4]
        if np.any(np.abs(wcol) < 1e-300):
            raise ValidationError("unprojection hit a degenerate w")
        return world[:, :3] / wcol

    def center(self):
        """Projection center (eye) or None for direction cameras (ortho)."""
        n = self.matrix[:, [0, 1, 3]]  # clip x, y, w columns
        a, b = n[:3, :], n[3, :]
        try:
            return np.linalg.solve(a.T, -b)
        except np.linalg.LinAlgError:
            return None

    def project(self, points: np.ndarray):
        """World points -> (pixel coords (P,2), valid mask) under this camera."""
        pts = np.asarray(points, dtype=np.float64)
        homo = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
        clip = homo @ self.matrix
        w = clip[:, 3]
        valid = w > 1e-9
        safe_w = np.where(valid, w, 1.0)
        ndc = clip[:, :2] / safe_w[:, None]
        u = (ndc[:, 0] + 1.0) / 2.0 * self.width - 0.5
        v = (1.0 - ndc[:, 1]) / 2.0 * self.height - 0.5
        inside = (
            valid
            & (u >= -0.5)
            & (u <= self.width - 0.5)
            & (v >= -0.5)
            & (v <= self.height - 0.5)
        )
        return np.stack([u, v], axis=1), inside

    def view_directions(self, points: np.ndarray) -> np.ndarray:
        """Unit vectors from the camera center toward each point."""
        c = self.center()
        if c is None:
            _o, d = generate_rays(self)
            return np.broadcast_to(d[0], points.shape).copy()
        v = points - c
        return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class RenderConfig:
    samples_per_ray: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    stratified_jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise ValidationError("samples_per_ray must be >= 1")


@dataclass
class RenderOutput:
    """Rendered image plus compositing internals kept for gradient checks."""

    image_t: Tensor  # (H, W, 3) on the tape
    opacity: np.ndarray  # (H, W)
    weights: np.ndarray  # (rays, samples)
    residual: np.ndarray  # (rays,) leftover transmittance

    @property
    def image(self) -> np.ndarray:
        return self.image_t.data


def _ray_geometry(camera: Camera):
    """Per-pixel rays: origins on the near plane, unit directions, and the
    ray-parameter distance to the far plane."""
    ndc = camera.pixel_ndc()
    p0 = camera.unproject(ndc, -1.0)
    p1 = camera.unproject(ndc, 1.0)
    d = p1 - p0
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(norms < 1e-300):
        raise ValidationError("degenerate ray directions")
    return p0, d / norms, norms[:, 0]


def generate_rays(camera: Camera):
    """One ray per pixel center: (origins (H*W,3), unit directions (H*W,3))."""
    origins, dirs, _t_far = _ray_geometry(camera)
    return origins, dirs


@dataclass
class RayBundle:
    """Precomputed sampling geometry for one (grid lattice, camera, config).

    Rendering many steps against fixed cameras (distillation) recomputes
    identical ray/corner arithmetic; bundles hoist it out of the loop.
    Only valid while the grid resolution and extent stay unchanged, and
    only without stratified jitter.
    """

    height: int
    width: int
    samples: int
    idx: np.ndarray  # (rays*samples, 8) trilinear corner indices
    weights: np.ndarray  # (rays*samples, 8)
    delta: np.ndarray  # (rays, samples) per-sample step lengths
    resolution: int
    extent: tuple


def precompute_rays(grid: VoxelGrid, camera: Camera, cfg: RenderConfig) -> RayBundle:
    from .field import trilinear_weights

    if cfg.stratified_jitter:
        raise ValidationError("ray bundles require deterministic (unjittered) sampling")
    n = cfg.samples_per_ray
    origins, dirs, t_far = _ray_geometry(camera)
    rays = origins.shape[0]
    lo, hi = grid.extent
    entry, exit_ = _intersect_extent(origins, dirs, lo, hi, t_far)
    span = exit_ - entry
    delta = span / n
    ts = entry[:, None] + (np.arange(n)[None, :] + 0.5) * delta[:, None]
    pts = origins[:, None, :] + dirs[:, None, :] * ts[:, :, None]
    idx, w = trilinear_weights(grid, pts.reshape(rays * n, 3))
    return RayBundle(
        height=camera.height,
        width=camera.width,
        samples=n,
        idx=idx,
        weights=w,
        delta=np.broadcast_to(delta[:, None], (rays, n)).copy(),
        resolution=grid.resolution,
        extent=grid.extent,
    )


def _intersect_extent(origins, dirs, lo, hi, t_max):
    """Entry/exit parameters of each ray against the extent cube and [0, t_max].

    Origins lie on the camera's near plane, so the valid ray segment runs
    from parameter 0 to the per-ray far-plane distance ``t_max``.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    near_ax = np.minimum(t1, t2)
    far_ax = np.maximum(t1, t2)
    # parallel rays: inside the slab -> (-inf, +inf); outside -> empty
    par = np.abs(dirs) < 1e-12
    if np.any(par):
        inside = (origins >= lo) & (origins <= hi)
        near_ax = np.where(par, np.where(inside, -np.inf, np.inf), near_ax)
        far_ax = np.where(par, np.where(inside, np.inf, -np.inf), far_ax)
    entry = np.maximum(near_ax.max(axis=1), 0.0)
    exit_ = np.minimum(far_ax.min(axis=1), t_max)
    miss = exit_ <= entry
    entry = np.where(miss, 0.0, entry)
    exit_ = np.where(miss, 0.0, exit_)
    return entry, exit_


def render(grid: VoxelGrid, decoder, camera: Camera, cfg: RenderConfig,
           bundle: RayBundle | None = None) -> RenderOutput:
    """Emission-absorption render, differentiable w.r.t. grid and decoder.

    Pass a matching precomputed ``bundle`` to skip the per-call ray and
    corner arithmetic (used by the distillation loop).
    """
    if bundle is not None:
        if (bundle.resolution != grid.resolution or bundle.extent != grid.extent
                or bundle.height != camera.height or bundle.width != camera.width
                or bundle.samples != cfg.samples_per_ray):
            raise ValidationError("ray bundle does not match grid/camera/config")
        n = bundle.samples
        rays = bundle.height * bundle.width
        delta_rn = bundle.delta
        feats = T.weighted_gather(grid.flat_features(), bundle.idx, bundle.weights)
    else:
        n = cfg.samples_per_ray
        origins, dirs, t_far = _ray_geometry(camera)
        rays = origins.shape[0]
        lo, hi = grid.extent
        entry, exit_ = _intersect_extent(origins, dirs, lo, hi, t_far)

        span = exit_ - entry  # zero for missed rays
        delta = span / n
        if cfg.stratified_jitter:
            rng = np.random.default_rng(cfg.seed)
            offsets = rng.uniform(size=(rays, n))
        else:
            offsets = np.full((rays, n), 0.5)
        ts = entry[:, None] + (np.arange(n)[None, :] + offsets) * delta[:, None]
        pts = origins[:, None, :] + dirs[:, None, :] * ts[:, :, None]
        delta_rn = np.broadcast_to(delta[:, None], (rays, n)).copy()
        feats = trilinear_sample(grid, pts.reshape(rays * n, 3))

    density, color = decoder.decode(feats)
    if not np.all(np.isfinite(density.data)):
        raise ValidationError("non-finite densities in render")

    sigma = T.reshape(density, (rays, n))
    a = T.mul(sigma, Tensor(delta_rn))
    ca = T.cumsum(a, axis=1)
    trans = T.exp(T.mul(T.sub(ca, a), -1.0))  # transmittance before each sample
    absorb = T.sub(1.0, T.exp(T.mul(a, -1.0)))
    w = T.mul(trans, absorb)
    t_final = T.exp(T.mul(T.reshape(T.narrow(ca, 1, n - 1, 1), (rays,)), -1.0))

    channels = []
    for k in range(3):
        ck = T.reshape(T.narrow(color, 1, k, 1), (rays, n))
        pix = T.tensor_sum(T.mul(w, ck), axis=1)
        pix = T.add(pix, T.mul(t_final, float(cfg.background[k])))
        channels.append(T.reshape(pix, (rays, 1)))
    image = T.reshape(T.concat(channels, axis=1), (camera.height, camera.width, 3))

    with T.no_grad():
        opacity = w.data.sum(axis=1).reshape(camera.height, camera.width)
    return RenderOutput(
        image_t=image,
        opacity=opacity,
        weights=w.data.copy(),
        residual=t_final.data.copy(),
    )


PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0,1]; identical images cap at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    for img in (a, b):
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ValidationError("psnr expects values in [0, 1]")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))
