"""Joint training of the 3-D volume denoiser and the 2-D super-resolver.

A training step has no ground-truth volume to denoise, so it bootstraps
one: pure noise is denoised once at the final step to get a clean
estimate, that estimate is re-noised to a random step and denoised
again, and the result is rendered into target views where a photometric
loss replaces the usual data-space denoising loss.  The super-resolution
denoiser runs as a second diffusion in parallel, conditioned on the
upsampled low-res render, and both losses are summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .bilinear import downsample_box, upsample_bilinear
from .conv import upsample3d_nearest, upsample2d_nearest
from .errors import NumericalError, ValidationError
from .field import FieldDecoder, VoxelGrid
from .render import Camera, RenderConfig, render
from .schedule import NoiseSchedule, ancestral_sample, loss_weight, q_sample
from .tensor import Tensor
from .unproject import Accumulator, Encoder2D, PosedImage, encode_frames, unproject


class VolumeDenoiser:
    """3-level 3-D conv encoder-decoder with skips; predicts the clean volume.

    The noisy volume and the conditioning volume stay separate inputs and
    are concatenated on the channel axis; the timestep enters as a
    sinusoidal per-channel bias after the first convolution.
    """

    def __init__(self, channels, rng, base=16):
        c0, c1, c2 = base, base * 3 // 2, base * 2
        self.channels = channels
        self.base = base
        self.conv_in = nn.Conv3d(2 * channels, c0, rng)
        self.enc0 = nn.Conv3d(c0, c0, rng)
        self.down1 = nn.Conv3d(c0, c1, rng, stride=2)
        self.enc1 = nn.Conv3d(c1, c1, rng)
        self.down2 = nn.Conv3d(c1, c2, rng, stride=2)
        self.enc2 = nn.Conv3d(c2, c2, rng)
        self.dec1 = nn.Conv3d(c2 + c1, c1, rng)
        self.dec0 = nn.Conv3d(c1 + c0, c0, rng)
        self.conv_out = nn.Conv3d(c0, channels, rng)
        self._c0 = c0

    def __call__(self, noisy, cond, t: int) -> Tensor:
        noisy = noisy if isinstance(noisy, Tensor) else Tensor(noisy)
        cond = cond if isinstance(cond, Tensor) else Tensor(cond)
        if noisy.data.shape != cond.data.shape:
            raise ValidationError("volume denoiser: noisy/conditioning shape mismatch")
        if any(s % 4 for s in noisy.data.shape[1:]):
            raise ValidationError("volume denoiser needs resolutions divisible by 4 "
                                  "(two stride-2 levels)")
        x = T.concat([noisy, cond], axis=0)
        x = self.conv_in(x)
        x = T.add_bias(x, Tensor(nn.time_embedding(t, self._c0)), axis=0)
        x = T.relu(x)
        s0 = T.relu(self.enc0(x))
        x = T.relu(self.down1(s0))
        s1 = T.relu(self.enc1(x))
        x = T.relu(self.down2(s1))
        x = T.relu(self.enc2(x))
        x = upsample3d_nearest(x, 2)
        x = T.relu(self.dec1(T.concat([x, s1], axis=0)))
        x = upsample3d_nearest(x, 2)
        x = T.relu(self.dec0(T.concat([x, s0], axis=0)))
        return self.conv_out(x)

    def parameters(self):
        return nn.collect(
            {
                "conv_in": self.conv_in,
                "enc0": self.enc0,
                "down1": self.down1,
                "enc1": self.enc1,
                "down2": self.down2,
                "enc2": self.enc2,
                "dec1": self.dec1,
                "dec0": self.dec0,
                "conv_out": self.conv_out,
            }
        )


class SuperResDenoiser:
    """2-level 2-D U-shaped denoiser conditioned on an upsampled low-res render.

    Output head is a sigmoid, so predictions live in (0, 1) like the
    targets.
    """

    def __init__(self, rng, base=16):
        c0, c1 = base, base * 2
        self.base = base
        self.conv_in = nn.Conv2d(6, c0, rng)
        self.enc0 = nn.Conv2d(c0, c0, rng)
        self.down1 = nn.Conv2d(c0, c1, rng, stride=2)
        self.enc1 = nn.Conv2d(c1, c1, rng)
        self.dec0 = nn.Conv2d(c1 + c0, c0, rng)
        self.conv_out = nn.Conv2d(c0, 3, rng)
        self._c0 = c0

    def __call__(self, noisy_image, cond_image, t: int) -> Tensor:
        """(H, W, 3) noisy target + (H, W, 3) conditioning -> (H, W, 3)."""
        noisy = noisy_image if isinstance(noisy_image, Tensor) else Tensor(noisy_image)
        cond = cond_image if isinstance(cond_image, Tensor) else Tensor(cond_image)
        if noisy.data.shape != cond.data.shape:
            raise ValidationError("super-res denoiser: image/conditioning shape mismatch")
        if noisy.data.shape[0] % 2 or noisy.data.shape[1] % 2:
            raise ValidationError("super-res denoiser needs even image sizes")
        x = T.concat([T.permute(noisy, (2, 0, 1)), T.permute(cond, (2, 0, 1))], axis=0)
        x = self.conv_in(x)
        x = T.add_bias(x, Tensor(nn.time_embedding(t, self._c0)), axis=0)
        x = T.relu(x)
        s0 = T.relu(self.enc0(x))
        x = T.relu(self.down1(s0))
        x = T.relu(self.enc1(x))
        x = upsample2d_nearest(x, 2)
        x = T.relu(self.dec0(T.concat([x, s0], axis=0)))
        out = T.sigmoid(self.conv_out(x))
        return T.permute(out, (1, 2, 0))

    def parameters(self):
        return nn.collect(
            {
                "conv_in": self.conv_in,
                "enc0": self.enc0,
                "down1": self.down1,
                "enc1": self.enc1,
                "dec0": self.dec0,
                "conv_out": self.conv_out,
            }
        )


@dataclass
class Models:
    """All learnable components plus the grid geometry they share."""

    volume_denoiser: VolumeDenoiser
    superres: SuperResDenoiser
    decoder: FieldDecoder
    encoder: Encoder2D
    accumulator: Accumulator
    grid_resolution: int
    grid_channels: int
    extent: tuple = (-1.0, 1.0)

    def parameters(self):
        return nn.collect(
            {
                "volume_denoiser": self.volume_denoiser,
                "superres": self.superres,
                "decoder": self.decoder,
                "encoder": self.encoder,
                "accumulator": self.accumulator,
            }
        )

    def grid_spec(self) -> VoxelGrid:
        return VoxelGrid.zeros(self.grid_resolution, self.grid_channels, self.extent)


@dataclass
class MultiViewScene:
    """Posed high-res frames plus box-downsampled low-res training targets."""

    frames: list  # PosedImage at high resolution
    low_frames: list  # PosedImage at low resolution (same cameras, half size)
    scene_id: str = "scene"

    @classmethod
    def from_frames(cls, frames, scene_id="scene", factor=2):
        low = []
        for fr in frames:
            cam = fr.camera
            low_cam = Camera(
                cam.matrix, cam.width // factor, cam.height // factor, cam.near, cam.far
            )
            low.append(PosedImage(downsample_box(fr.image, factor), low_cam))
        return cls(frames=list(frames), low_frames=low, scene_id=scene_id)

    def __len__(self):
        return len(self.frames)


@dataclass
class TrainStepConfig:
    source_frames: int = 15
    target_frames: int = 4
    empty_cond_prob: float = 0.2
    samples_per_ray: int = 32
    superres_targets: int = 1  # how many of the targets also feed the 2-D loss
    couple_superres: bool = False  # propagate 2-D loss gradients into the render
    weighting: str = "uniform"  # or "closed_form" (t>=2 closed-form coefficient)
    upsample_factor: int = 2


@dataclass
class TrainStepResult:
    loss_3d: float
    loss_2d: float
    grads: dict
    t_volume: int
    conditioned: bool

    @property
    def total(self):
        return self.loss_3d + self.loss_2d


def bootstrap_clean_volume(denoiser, cond, shape, rng, steps: int) -> Tensor:
    """One-shot clean estimate from pure noise at the final step."""
    cond_t = cond if isinstance(cond, Tensor) else Tensor(cond)
    if cond_t.data.shape != tuple(shape):
        raise ValidationError("bootstrap: conditioning shape mismatch")
    v_noise = rng.standard_normal(shape)
    return denoiser(Tensor(v_noise), cond_t, steps)


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = T.sub(pred, Tensor(target))
    return T.mean(T.mul(diff, diff))


def training_step(scene: MultiViewScene, models: Models, sched: NoiseSchedule,
                  cfg: TrainStepConfig, rng: np.random.Generator) -> TrainStepResult:
    """One photometric double-denoising step; returns losses and gradients."""
    n = len(scene)
    if n < cfg.source_frames + cfg.target_frames:
        raise ValidationError(
            f"scene has {n} frames; needs >= {cfg.source_frames + cfg.target_frames}"
        )
    d, s = models.grid_channels, models.grid_resolution
    perm = rng.permutation(n)
    use_cond = rng.random() >= cfg.empty_cond_prob
    src_ids = perm[: cfg.source_frames] if use_cond else np.array([], dtype=int)
    tgt_ids = perm[cfg.source_frames : cfg.source_frames + cfg.target_frames]

    if use_cond:
        sources = [scene.low_frames[i] for i in src_ids]
        maps = encode_frames(models.encoder, sources)
        cond = unproject(maps, [f.camera for f in sources], models.grid_spec(),
                         models.accumulator)
    else:
        cond = Tensor(np.zeros((d, s, s, s)))

    v0 = bootstrap_clean_volume(models.volume_denoiser, cond, (d, s, s, s), rng, sched.steps)
    t_vol = int(rng.integers(1, sched.steps + 1))
    eps = rng.standard_normal((d, s, s, s))
    v_t = q_sample(v0, t_vol, eps, sched)
    v0_hat = models.volume_denoiser(v_t, cond, t_vol)
    grid = VoxelGrid(s, d, v0_hat, models.extent)

    if cfg.weighting == "closed_form" and t_vol >= 2:
        weight = loss_weight(t_vol, sched)
    else:
        weight = 1.0

    rcfg = RenderConfig(samples_per_ray=cfg.samples_per_ray)
    loss_3d = None
    loss_2d = None
    for j, i in enumerate(tgt_ids):
        low = scene.low_frames[i]
        out = render(grid, models.decoder, low.camera, rcfg)
        term = T.mul(_mse(out.image_t, low.image), weight / len(tgt_ids))
        loss_3d = term if loss_3d is None else T.add(loss_3d, term)

        if j < cfg.superres_targets:
            hi = scene.frames[i]
            t_img = int(rng.integers(1, sched.steps + 1))
            eps2 = rng.standard_normal(hi.image.shape)
            noisy = q_sample(hi.image, t_img, eps2, sched)
            low_render = out.image_t if cfg.couple_superres else Tensor(out.image.copy())
            cond_img = upsample_bilinear(low_render, cfg.upsample_factor)
            pred = models.superres(Tensor(noisy), cond_img, t_img)
            term2 = T.mul(_mse(pred, hi.image), 1.0 / cfg.superres_targets)
            loss_2d = term2 if loss_2d is None else T.add(loss_2d, term2)

    total = T.add(loss_3d, loss_2d)
    if not np.isfinite(total.data):
        raise NumericalError("non-finite training loss")

    params = models.parameters()
    for p in params.values():
        p.zero_grad()
    total.backward()
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    return TrainStepResult(
        loss_3d=loss_3d.item(),
        loss_2d=loss_2d.item(),
        grads=grads,
        t_volume=t_vol,
        conditioned=use_cond,
    )


def super_resolve(superres: SuperResDenoiser, low_res: np.ndarray,
                  sched: NoiseSchedule, rng: np.random.Generator, factor=2) -> np.ndarray:
    """Sample one high-res image from the conditional reverse chain."""
    with T.no_grad():
        cond = upsample_bilinear(np.asarray(low_res, dtype=np.float64), factor).data

        def denoiser(x_t, t):
            return superres(x_t, cond, t).data

        return ancestral_sample(denoiser, cond.shape, sched, rng)


def sample_scene(models: Models, sched: NoiseSchedule, cond_frames,
                 rng: np.random.Generator, cameras, render_cfg: RenderConfig | None = None):
    """Ancestral volume sampling (optionally view-conditioned) plus renders."""
    d, s = models.grid_channels, models.grid_resolution
    with T.no_grad():
        if cond_frames:
            maps = encode_frames(models.encoder, cond_frames)
            cond = unproject(maps, [f.camera for f in cond_frames], models.grid_spec(),
                             models.accumulator).data
        else:
            cond = np.zeros((d, s, s, s))

        def denoiser(v_t, t):
            return models.volume_denoiser(Tensor(v_t), Tensor(cond), t).data

        v0 = ancestral_sample(denoiser, (d, s, s, s), sched, rng)
        grid = VoxelGrid(s, d, Tensor(v0), models.extent)
        rcfg = render_cfg or RenderConfig()
        images = [render(grid, models.decoder, cam, rcfg).image for cam in cameras]
    return grid, images


def build_models(grid_resolution, grid_channels, rng, decoder_hidden=(32,),
                 denoiser3d_base=16, denoiser2d_base=16, encoder_widths=(8, 12),
                 accumulator_hidden=32, extent=(-1.0, 1.0)) -> Models:
    """Construct all components with rng-derived initializations."""
    return Models(
        volume_denoiser=VolumeDenoiser(grid_channels, rng, base=denoiser3d_base),
        superres=SuperResDenoiser(rng, base=denoiser2d_base),
        decoder=FieldDecoder(grid_channels, hidden=decoder_hidden, rng=rng),
        encoder=Encoder2D(grid_channels, rng, widths=encoder_widths),
        accumulator=Accumulator(grid_channels, rng, hidden=accumulator_hidden),
        grid_resolution=grid_resolution,
        grid_channels=grid_channels,
        extent=extent,
    )
