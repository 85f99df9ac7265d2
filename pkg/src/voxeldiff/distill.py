"""Fuse per-view super-resolved hypotheses into one high-res voxel field.

Independently super-resolved views of the same object disagree in their
fine details, so fitting a field to all of them averages detail away.
The remedy: keep K hypotheses per viewpoint, split images into small
tiles, and per tile charge the render only for the closest hypothesis.
The optimized field then only has to agree with *one* plausible
hypothesis per tile, and tiles may come from different hypotheses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bilinear import upsample_bilinear
from .errors import NumericalError, ValidationError
from .field import FieldDecoder, VoxelGrid, upsample_grid
from .generation import SuperResDenoiser, super_resolve
from .optim import Adam
from .render import Camera, RenderConfig, precompute_rays, render
from .schedule import NoiseSchedule, q_sample
from .tensor import Tensor

LOSS_VARIANTS = ("patch-remix", "mse", "sds")


@dataclass
class HypothesisBank:
    """Per-camera stacks of K equally sized candidate high-res images."""

    cameras: list
    hypotheses: list  # one (K, H, W, 3) array per camera
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("hypothesis bank needs K >= 1")
        if len(self.cameras) != len(self.hypotheses):
            raise ValidationError("bank camera/hypothesis count mismatch")
        shape = None
        norm = []
        for stack in self.hypotheses:
            arr = np.asarray(stack, dtype=np.float64)
            if arr.ndim != 4 or arr.shape[0] != self.k:
                raise ValidationError(f"each camera needs exactly {self.k} hypotheses")
            if shape is None:
                shape = arr.shape[1:]
            elif arr.shape[1:] != shape:
                raise ValidationError("bank images must share resolution")
            norm.append(arr)
        self.hypotheses = norm


@dataclass
class DistillConfig:
    patch_size: int = 16
    steps: int = 25000
    lr: float = 2e-4
    loss: str = "patch-remix"
    cameras: int = 40
    camera_radius: float = 2.8
    camera_elevation_deg: float = 0.0
    image_size: int = 64
    low_res_size: int = 32
    hypotheses: int = 5
    highres_resolution: int = 32
    minibatch: int = 4
    samples_per_ray: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValidationError("distill steps must be >= 0")
        if self.patch_size < 1:
            raise ValidationError("patch size must be >= 1")
        if self.loss not in LOSS_VARIANTS:
            raise ValidationError(f"loss must be one of {LOSS_VARIANTS}")


def _tile_sse(diff_sq: np.ndarray, patch: int):
    """Sum of squared errors per non-overlapping patch; (TH, TW) output."""
    h, w, _c = diff_sq.shape
    th, tw = -(-h // patch), -(-w // patch)
    padded = np.zeros((th * patch, tw * patch))
    padded[:h, :w] = diff_sq.sum(axis=2)
    return padded.reshape(th, patch, tw, patch).sum(axis=(1, 3))


def remix_target(render_image: np.ndarray, hypotheses: np.ndarray, patch: int):
    """Per-tile closest hypothesis assembly; returns (target, selection)."""
    hyp = np.asarray(hypotheses, dtype=np.float64)
    if hyp.ndim != 4 or hyp.shape[1:] != render_image.shape:
        raise ValidationError("hypothesis stack shape mismatch")
    k = hyp.shape[0]
    sse = np.stack(
        [_tile_sse((render_image - hyp[i]) ** 2, patch) for i in range(k)]
    )
    sel = np.argmin(sse, axis=0)  # ties -> lowest hypothesis index
    h, w, _c = render_image.shape
    rows = np.minimum(np.arange(h) // patch, sel.shape[0] - 1)
    cols = np.minimum(np.arange(w) // patch, sel.shape[1] - 1)
    pix_sel = sel[rows[:, None], cols[None, :]]
    target = hyp[pix_sel, np.arange(h)[:, None], np.arange(w)[None, :], :]
    return target, sel


def patch_remix_loss(render_image, hypotheses, patch: int):
    """Mean squared error against the per-tile closest hypothesis remix.

    Tile contributions are weighted by pixel count, so the loss equals
    the plain MSE against the assembled target image; with K=1 it reduces
    exactly to MSE against the single hypothesis.  Differentiable w.r.t.
    the render when it is a tape tensor.
    """
    hyp = np.asarray(hypotheses, dtype=np.float64)
    if hyp.ndim != 4 or hyp.shape[0] < 1:
        raise ValidationError("patch_remix_loss needs a (K, H, W, 3) hypothesis stack")
    if isinstance(render_image, Tensor):
        target, _sel = remix_target(render_image.data, hyp, patch)
        diff = T.sub(render_image, Tensor(target))
        return T.mean(T.mul(diff, diff))
    target, _sel = remix_target(np.asarray(render_image, dtype=np.float64), hyp, patch)
    return float(np.mean((render_image - target) ** 2))


def mse_distill_loss(render_image, hypothesis):
    """Plain per-pixel MSE against a single hypothesis image."""
    hyp = np.asarray(hypothesis, dtype=np.float64)
    if isinstance(render_image, Tensor):
        if hyp.shape != render_image.data.shape:
            raise ValidationError("mse_distill_loss shape mismatch")
        diff = T.sub(render_image, Tensor(hyp))
        return T.mean(T.mul(diff, diff))
    if hyp.shape != np.shape(render_image):
        raise ValidationError("mse_distill_loss shape mismatch")
    return float(np.mean((render_image - hyp) ** 2))


def sds_gradient(render_image: np.ndarray, superres: SuperResDenoiser,
                 conditioning: np.ndarray, t: int, sched: NoiseSchedule,
                 rng: np.random.Generator) -> np.ndarray:
    """Score-distillation gradient on the render: weight(t) * (render - pred).

    The render is noised to step t, denoised once, and the difference to
    the prediction becomes the gradient image; nothing propagates through
    the denoiser itself.  weight(t) = 1 - abar_t.
    """
    img = np.asarray(render_image, dtype=np.float64)
    eps = rng.standard_normal(img.shape)
    noisy = q_sample(img, t, eps, sched)
    with T.no_grad():
        pred = superres(noisy, conditioning, t).data
    return (1.0 - sched.abar(t)) * (img - pred)


def build_hypothesis_bank(superres: SuperResDenoiser, grid: VoxelGrid,
                          decoder, cameras, k: int, rng: np.random.Generator,
                          sched: NoiseSchedule, low_res_size=None,
                          samples_per_ray=64, background=(0.0, 0.0, 0.0)) -> HypothesisBank:
    """Render each camera at low resolution and draw K super-resolved samples."""
    if k < 1:
        raise ValidationError("bank needs K >= 1")
    stacks = []
    streams = rng.spawn(len(cameras))
    rcfg = RenderConfig(samples_per_ray=samples_per_ray, background=background)
    for cam, stream in zip(cameras, streams):
        factor = 2 if low_res_size is None else cam.width // low_res_size
        low_cam = Camera(cam.matrix, cam.width // factor, cam.height // factor,
                         cam.near, cam.far)
        with T.no_grad():
            low = render(grid, decoder, low_cam, rcfg).image
        samples = [super_resolve(superres, low, sched, stream, factor=factor) for _ in range(k)]
        stacks.append(np.stack(samples))
    return HypothesisBank(cameras=list(cameras), hypotheses=stacks, k=k)


def distill_conditioning(grid: VoxelGrid, decoder, cameras, low_res_size,
                         samples_per_ray=64, background=(0.0, 0.0, 0.0)):
    """Low-res renders upsampled to full size, for SDS conditioning."""
    rcfg = RenderConfig(samples_per_ray=samples_per_ray, background=background)
    out = []
    for cam in cameras:
        factor = cam.width // low_res_size
        low_cam = Camera(cam.matrix, low_res_size, cam.height // factor, cam.near, cam.far)
        with T.no_grad():
            low = render(grid, decoder, low_cam, rcfg).image
            out.append(upsample_bilinear(low, factor).data)
    return out


@dataclass
class DistillResult:
    grid: VoxelGrid
    decoder: FieldDecoder
    losses: list


def distill(v0: VoxelGrid, decoder_init: FieldDecoder, bank: HypothesisBank,
            cfg: DistillConfig, superres=None, conditioning=None,
            sched: NoiseSchedule | None = None) -> DistillResult:
    """Optimize an upsampled grid plus a per-scene decoder against the bank.

    The grid initializes from a trilinear upsample of ``v0`` and the
    decoder from a copy of ``decoder_init``; both train under a single
    Adam with cfg.lr.  ``superres``/``conditioning``/``sched`` are only
    needed for the sds loss variant.  Deterministic given cfg.seed.
    """
    if cfg.loss == "sds" and (superres is None or conditioning is None or sched is None):
        raise ValidationError("sds distillation needs superres, conditioning, and a schedule")
    grid_hi = upsample_grid(v0, cfg.highres_resolution)
    features = Tensor(grid_hi.features.data.copy(), requires_grad=True)
    grid_hi = VoxelGrid(cfg.highres_resolution, v0.channels, features, v0.extent)
    decoder = decoder_init.clone()
    params = {"grid.features": features}
    for name, p in decoder.parameters().items():
        p.requires_grad = True
        params[f"decoder.{name}"] = p
    opt = Adam(params, lr=cfg.lr)

    rng = np.random.default_rng(cfg.seed)
    n_cams = len(bank.cameras)
    m = min(cfg.minibatch, n_cams)
    rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, background=cfg.background)
    bundles = [precompute_rays(grid_hi, cam, rcfg) for cam in bank.cameras]
    losses = []
    for step in range(cfg.steps):
        cam_ids = rng.choice(n_cams, size=m, replace=False)
        opt.zero_grad()
        step_loss = 0.0
        for ci in cam_ids:
            out = render(grid_hi, decoder, bank.cameras[ci], rcfg, bundle=bundles[ci])
            if cfg.loss == "patch-remix":
                loss = T.mul(patch_remix_loss(out.image_t, bank.hypotheses[ci], cfg.patch_size), 1.0 / m)
                loss.backward()
                step_loss += loss.item() * m
            elif cfg.loss == "mse":
                loss = T.mul(mse_distill_loss(out.image_t, bank.hypotheses[ci][0]), 1.0 / m)
                loss.backward()
                step_loss += loss.item() * m
            else:  # sds
                t = int(rng.integers(max(1, int(0.02 * sched.steps)),
                                     max(2, int(0.98 * sched.steps)) + 1))
                g = sds_gradient(out.image, superres, conditioning[ci], t, sched, rng)
                out.image_t.backward(seed=g / m)
                step_loss += float(np.mean(g * g)) * m
        step_loss /= m
        if not np.isfinite(step_loss):
            raise NumericalError(f"distillation diverged at step {step}")
        losses.append(step_loss)
        opt.step()
    return DistillResult(grid=grid_hi, decoder=decoder, losses=losses)


def variance_heatmap(bank: HypothesisBank, camera_index: int) -> np.ndarray:
    """Per-pixel unbiased variance across hypotheses, averaged over channels."""
    stack = bank.hypotheses[camera_index]
    if bank.k < 2:
        return np.zeros(stack.shape[1:3])
    return stack.var(axis=0, ddof=1).mean(axis=-1)


def save_bank(directory, bank: HypothesisBank) -> None:
    """One subdirectory per camera: K raw images plus the camera matrix."""
    from pathlib import Path

    from .serialization import save_image_raw

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ci, (cam, stack) in enumerate(zip(bank.cameras, bank.hypotheses)):
        cam_dir = directory / f"cam_{ci:03d}"
        cam_dir.mkdir(exist_ok=True)
        for j in range(bank.k):
            save_image_raw(cam_dir / f"hyp_{j:03d}.raw", stack[j])
        lines = [" ".join(repr(float(x)) for x in row) for row in cam.matrix]
        lines.append(f"{cam.width} {cam.height} {float(cam.near)!r} {float(cam.far)!r}")
        (cam_dir / "camera.txt").write_text("\n".join(lines) + "\n")


def load_bank(directory) -> HypothesisBank:
    from pathlib import Path

    from .errors import FormatError
    from .serialization import load_image_raw

    directory = Path(directory)
    cam_dirs = sorted(p for p in directory.iterdir() if p.is_dir() and p.name.startswith("cam_"))
    if not cam_dirs:
        raise FormatError(f"no camera subdirectories in {directory}")
    cameras, stacks = [], []
    k = None
    for cam_dir in cam_dirs:
        lines = (cam_dir / "camera.txt").read_text().strip().splitlines()
        if len(lines) != 5:
            raise FormatError(f"malformed camera.txt in {cam_dir}")
        matrix = np.array([[float(x) for x in line.split()] for line in lines[:4]])
        w, h, near, far = lines[4].split()
        cameras.append(Camera(matrix, int(w), int(h), float(near), float(far)))
        hyp_paths = sorted(cam_dir.glob("hyp_*.raw"))
        if k is None:
            k = len(hyp_paths)
        elif len(hyp_paths) != k:
            raise FormatError("cameras disagree on hypothesis count")
        stacks.append(np.stack([load_image_raw(p) for p in hyp_paths]))
    return HypothesisBank(cameras=cameras, hypotheses=stacks, k=k)
