"""Experiment orchestration: stages, reports, reproducibility plumbing.

Every stage runs under an output-directory lock, writes artifacts plus a
``report.json``, and is a deterministic function of (config, seed).
Reports carry the config hash and seed; their reproducibility digest
covers everything except wall-clock runtimes.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .config import ExperimentConfig
from .distill import (
    DistillConfig,
    HypothesisBank,
    build_hypothesis_bank,
    distill,
    distill_conditioning,
    load_bank,
    save_bank,
    variance_heatmap,
)
from .errors import FormatError, NumericalError, ValidationError
from .field import FieldDecoder, VoxelGrid
from .generation import (
    Models,
    MultiViewScene,
    TrainStepConfig,
    build_models,
    sample_scene,
    training_step,
)
from .gradcheck import run_all_checks
from .nn import load_parameters
from .optim import Adam
from .render import RenderConfig, psnr, render
from .scenes import bake_grid, gen_synthetic_scene, random_scene_spec, ring_cameras
from .schedule import make_schedule
from .serialization import (
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    save_grid,
    save_image_png,
    save_image_raw,
)
from .tensor import Tensor


@dataclass
class Report:
    stage: str
    seed: int
    config_hash: str
    status: str = "ok"
    metrics: dict = field(default_factory=dict)
    runtimes: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    error: str | None = None
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "stage": self.stage,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "status": self.status,
            "metrics": self.metrics,
            "runtimes": self.runtimes,
            "artifacts": self.artifacts,
            "error": self.error,
        }

    def digest(self) -> str:
        """Reproducibility digest: everything except wall-clock runtimes."""
        data = self.to_dict()
        data.pop("runtimes")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Report":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"cannot read report {path}: {e}") from e
        validate_report(data)
        return cls(
            stage=data["stage"],
            seed=data["seed"],
            config_hash=data["config_hash"],
            status=data["status"],
            metrics=data["metrics"],
            runtimes=data["runtimes"],
            artifacts=data["artifacts"],
            error=data.get("error"),
            version=data["version"],
        )


def validate_report(data: dict) -> None:
    for key in ("version", "seed", "config_hash", "stage", "status", "metrics"):
        if key not in data:
            raise ValidationError(f"report missing reproducibility field {key!r}")


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(
            f"output directory {out_dir} is locked by another experiment ({lock})"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# -- shared construction helpers ------------------------------------------------


def _make_schedule(cfg: ExperimentConfig):
    return make_schedule(cfg.schedule.steps, beta_min=cfg.schedule.beta_min,
                         beta_max=cfg.schedule.beta_max)


def _build_models(cfg: ExperimentConfig, rng) -> Models:
    m = cfg.model
    return build_models(
        grid_resolution=cfg.grid.resolution,
        grid_channels=cfg.grid.channels,
        rng=rng,
        decoder_hidden=tuple(m.decoder_hidden),
        denoiser3d_base=m.denoiser3d_base,
        denoiser2d_base=m.denoiser2d_base,
        encoder_widths=tuple(m.encoder_widths),
        accumulator_hidden=m.accumulator_hidden,
    )


def _scene_spec(cfg: ExperimentConfig, seed: int, **overrides):
    sc = cfg.scene
    kwargs = dict(
        n_blobs=sc.blobs,
        grid_resolution=sc.grid_resolution,
        camera_count=sc.frame_count,
        camera_radius=sc.camera_radius,
        camera_elevation_deg=sc.camera_elevation_deg,
        image_size=sc.image_size,
        fov_y_deg=sc.fov_y_deg,
        samples_per_ray=sc.samples_per_ray,
    )
    kwargs.update(overrides)
    return random_scene_spec(seed, **kwargs)


def _training_scenes(cfg: ExperimentConfig):
    """Load scenes from a dataset directory, or generate synthetic ones."""
    if cfg.paths.dataset:
        root = Path(cfg.paths.dataset)
        scene_dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
        if not scene_dirs and (root / "manifest.json").exists():
            scene_dirs = [root]
        if not scene_dirs:
            raise ValidationError(f"no scene manifests under {root}")
        return [
            MultiViewScene.from_frames(load_dataset(p), scene_id=p.name)
            for p in scene_dirs
        ]
    scenes = []
    for i in range(cfg.scene.count):
        spec = _scene_spec(cfg, cfg.seed * 1000 + i)
        scenes.append(
            MultiViewScene.from_frames(gen_synthetic_scene(spec).frames, scene_id=f"scene_{i:03d}")
        )
    return scenes


def _distill_config(cfg: ExperimentConfig, **overrides) -> DistillConfig:
    d = cfg.distill
    kwargs = dict(
        patch_size=d.patch_size,
        steps=d.steps,
        lr=d.lr,
        loss=d.loss,
        cameras=d.cameras,
        camera_radius=d.camera_radius,
        camera_elevation_deg=d.camera_elevation_deg,
        image_size=d.image_size,
        low_res_size=d.low_res_size,
        hypotheses=d.hypotheses,
        highres_resolution=cfg.grid.highres_resolution,
        minibatch=d.minibatch,
        samples_per_ray=d.samples_per_ray,
        seed=cfg.seed,
    )
    kwargs.update(overrides)
    return DistillConfig(**kwargs)


def oracle_bank(cfg: ExperimentConfig, seed: int):
    """Ground-truth scene plus a consistent K-copy bank over a camera ring."""
    d = cfg.distill
    spec = _scene_spec(cfg, seed, image_size=d.image_size,
                       camera_count=d.cameras, camera_radius=d.camera_radius,
                       camera_elevation_deg=d.camera_elevation_deg,
                       samples_per_ray=d.samples_per_ray)
    gt = bake_grid(spec)
    cams = ring_cameras(d.cameras, d.camera_radius, d.camera_elevation_deg,
                        d.image_size, spec.fov_y_deg)
    rcfg = RenderConfig(samples_per_ray=d.samples_per_ray)
    from .field import AnalyticDecoder

    dec = AnalyticDecoder()
    with T.no_grad():
        images = [render(gt, dec, c, rcfg).image.copy() for c in cams]
    bank = HypothesisBank(cameras=cams, hypotheses=[np.stack([im] * d.hypotheses) for im in images], k=d.hypotheses)
    return spec, gt, dec, bank, images


def corrupted_bank(images, cameras, k, patch, rng, corrupt_amp=0.45,
                   clean_per_tile=True):
    """Bank with per-hypothesis localized blotches, each tile clean somewhere.

    Hypothesis j of camera c is the ground-truth image with random
    tile-aligned squares replaced by flat random colors; per tile at most
    k-1 hypotheses are corrupted, so the per-tile minimum can always find
    a clean source.  Returns (bank, masks) where masks[c][j] marks the
    corrupted pixels of hypothesis j.
    """
    stacks, masks = [], []
    for image in images:
        h, w, _ = image.shape
        th, tw = -(-h // patch), -(-w // patch)
        # choose which hypotheses are corrupted per tile
        corrupt = rng.random((k, th, tw)) < 0.5
        if clean_per_tile:
            all_bad = corrupt.all(axis=0)
            ties = np.argmax(rng.random((k, th, tw)), axis=0)
            for a, b in zip(*np.nonzero(all_bad)):
                corrupt[ties[a, b], a, b] = False
        stack = np.repeat(image[None], k, axis=0)
        mask = np.zeros((k, h, w), dtype=bool)
        for j in range(k):
            for a in range(th):
                for b in range(tw):
                    if not corrupt[j, a, b]:
                        continue
                    color = rng.random(3)
                    ys = slice(a * patch, min((a + 1) * patch, h))
                    xs = slice(b * patch, min((b + 1) * patch, w))
                    blot = np.clip(image[ys, xs] + corrupt_amp * (color - 0.5) * 2.0, 0.0, 1.0)
                    stack[j, ys, xs] = blot
                    mask[j, ys, xs] = True
        stacks.append(stack)
        masks.append(mask)
    bank = HypothesisBank(cameras=list(cameras), hypotheses=stacks, k=k)
    return bank, masks


def heldout_psnr(result_grid, result_decoder, gt_grid, gt_decoder, cameras, rcfg):
    """PSNR of distilled renders against ground-truth renders, per camera."""
    values = []
    with T.no_grad():
        for cam in cameras:
            ours = render(result_grid, result_decoder, cam, rcfg).image
            ref = render(gt_grid, gt_decoder, cam, rcfg).image
            values.append(psnr(ours, ref))
    return values


# -- stages ---------------------------------------------------------------------


def _stage_make_scene(cfg: ExperimentConfig, out: Path, report: Report):
    digests = {}
    for i in range(cfg.scene.count):
        spec = _scene_spec(cfg, cfg.seed * 1000 + i)
        scene = gen_synthetic_scene(spec)
        scene_dir = out / f"scene_{i:03d}"
        save_dataset(scene_dir, scene.frames)
        save_grid(scene_dir / "gt_grid.hfvg", scene.grid)
        blob = hashlib.sha256()
        for p in sorted(scene_dir.iterdir()):
            blob.update(p.name.encode())
            blob.update(p.read_bytes())
        digests[scene_dir.name] = blob.hexdigest()
    report.metrics["scene_digests"] = digests
    report.metrics["scene_count"] = cfg.scene.count
    report.artifacts["dataset"] = str(out)


def _stage_gradcheck(cfg: ExperimentConfig, out: Path, report: Report):
    results = run_all_checks(seed=cfg.seed)
    report.metrics["checks"] = [
        {"name": r.name, "max_rel_error": r.max_rel_error, "threshold": r.threshold,
         "passed": r.passed}
        for r in results
    ]
    failed = [r.name for r in results if not r.passed]
    report.metrics["all_passed"] = not failed
    if failed:
        raise NumericalError(f"gradient checks failed: {failed}")


def plateau_decay_due(losses, window: int, tol: float) -> bool:
    """True when the trailing window stopped improving on the previous one."""
    if not window or len(losses) < 2 * window:
        return False
    prev = float(np.mean(losses[-2 * window : -window]))
    cur = float(np.mean(losses[-window:]))
    return cur > prev * (1.0 - tol)


def _stage_train(cfg: ExperimentConfig, out: Path, report: Report):
    rng = np.random.default_rng(cfg.seed)
    scenes = _training_scenes(cfg)
    models = _build_models(cfg, rng)
    sched = _make_schedule(cfg)
    tc = cfg.train
    step_cfg = TrainStepConfig(
        source_frames=tc.source_frames,
        target_frames=tc.target_frames,
        empty_cond_prob=tc.empty_cond_prob,
        samples_per_ray=tc.samples_per_ray,
        superres_targets=tc.superres_targets,
        couple_superres=tc.couple_superres,
        weighting=cfg.schedule.weighting,
    )
    opt = Adam(models.parameters(), lr=tc.lr)
    losses = []
    log_path = out / "train_log.txt"
    window = tc.plateau_window
    with open(log_path, "w") as log:
        for step in range(tc.steps):
            scene = scenes[int(rng.integers(len(scenes)))]
            res = training_step(scene, models, sched, step_cfg, rng)
            opt.step()
            losses.append(res.total)
            log.write(f"{step} {res.loss_3d:.8e} {res.loss_2d:.8e} {opt.lr:.3e}\n")
            if window and (step + 1) % window == 0 and plateau_decay_due(
                losses, window, tc.plateau_tol
            ):
                opt.lr = opt.lr / 10.0
    ckpt = out / "checkpoint.hfck"
    save_checkpoint(ckpt, models.parameters())
    w = min(max(len(losses) // 10, 1), 50)
    initial = float(np.mean(losses[:w]))
    final = float(np.mean(losses[-w:]))
    report.metrics.update(
        {
            "steps": tc.steps,
            "initial_loss": initial,
            "final_loss": final,
            "reduction": 0.0 if initial == 0 else 1.0 - final / initial,
            "final_lr": opt.lr,
            "loss_curve": [float(x) for x in losses[:: max(1, len(losses) // 200)]],
        }
    )
    report.artifacts["checkpoint"] = str(ckpt)
    report.artifacts["train_log"] = str(log_path)


def _load_models(cfg: ExperimentConfig, rng) -> Models:
    models = _build_models(cfg, rng)
    if cfg.paths.checkpoint:
        load_parameters(models.parameters(), load_checkpoint(cfg.paths.checkpoint))
    return models


def _stage_sample(cfg: ExperimentConfig, out: Path, report: Report):
    rng = np.random.default_rng(cfg.seed)
    models = _load_models(cfg, rng)
    sched = _make_schedule(cfg)
    cond_frames = []
    if cfg.paths.dataset:
        scenes = _training_scenes(cfg)
        cond_frames = scenes[0].low_frames[: cfg.train.source_frames]
    cams = ring_cameras(8, cfg.scene.camera_radius, cfg.scene.camera_elevation_deg,
                        cfg.scene.image_size // 2, cfg.scene.fov_y_deg)
    rcfg = RenderConfig(samples_per_ray=cfg.train.samples_per_ray)
    grid, images = sample_scene(models, sched, cond_frames, rng, cams, rcfg)
    save_grid(out / "sample_grid.hfvg", grid)
    for i, img in enumerate(images):
        save_image_raw(out / f"sample_{i:02d}.raw", img)
        save_image_png(out / f"sample_{i:02d}.png", img)
    report.metrics.update(
        {
            "conditioned": bool(cond_frames),
            "render_means": [float(im.mean()) for im in images],
            "feature_rms": float(np.sqrt(np.mean(grid.features.data**2))),
        }
    )
    report.artifacts["grid"] = str(out / "sample_grid.hfvg")


def _initial_distill_inputs(cfg: ExperimentConfig, rng):
    """Fresh low-res grid and decoder to be refined by distillation."""
    d, s = cfg.grid.channels, cfg.grid.resolution
    v0 = VoxelGrid(s, d, Tensor(0.01 * rng.standard_normal((d, s, s, s))))
    decoder = FieldDecoder(d, hidden=tuple(cfg.model.decoder_hidden),
                           rng=np.random.default_rng(cfg.seed + 17))
    return v0, decoder


def _distill_oracle(cfg: ExperimentConfig, out: Path, report: Report, variants=None):
    rng = np.random.default_rng(cfg.seed)
    spec, gt_grid, gt_decoder, bank, _images = oracle_bank(cfg, cfg.seed)
    save_bank(out / "bank", bank)
    report.artifacts["bank"] = str(out / "bank")
    v0, decoder = _initial_distill_inputs(cfg, rng)
    d = cfg.distill
    held = ring_cameras(d.heldout_cameras, d.camera_radius, d.camera_elevation_deg,
                        d.image_size, spec.fov_y_deg,
                        azimuth_offset=np.pi / max(d.cameras, 1))
    rcfg = RenderConfig(samples_per_ray=d.samples_per_ray)

    sched = _make_schedule(cfg)
    rows = {}
    for variant in variants or [d.loss]:
        dcfg = _distill_config(cfg, loss=variant)
        extra = {}
        if variant == "sds":
            superres = _load_models(cfg, np.random.default_rng(cfg.seed + 3)).superres
            conditioning = distill_conditioning(v0, decoder, bank.cameras, d.low_res_size,
                                                samples_per_ray=d.samples_per_ray)
            extra = dict(superres=superres, conditioning=conditioning, sched=sched)
        result = distill(v0, decoder, bank, dcfg, **extra)
        values = heldout_psnr(result.grid, result.decoder, gt_grid, gt_decoder, held, rcfg)
        rows[variant] = {
            "heldout_psnr": values,
            "heldout_psnr_mean": float(np.mean(values)),
            "loss_first": result.losses[0] if result.losses else None,
            "loss_last": result.losses[-1] if result.losses else None,
        }
        tag = variant.replace("-", "_")
        save_grid(out / f"distilled_{tag}.hfvg", result.grid)
    return rows


def _stage_distill(cfg: ExperimentConfig, out: Path, report: Report):
    d = cfg.distill
    if d.bank_source == "oracle":
        rows = _distill_oracle(cfg, out, report)
        report.metrics["mode"] = "oracle"
        report.metrics.update(rows[d.loss])
    else:
        rng = np.random.default_rng(cfg.seed)
        models = _load_models(cfg, rng)
        sched = _make_schedule(cfg)
        if d.bank_source == "disk":
            if not cfg.paths.bank:
                raise ValidationError("bank_source 'disk' needs paths.bank")
            bank = load_bank(cfg.paths.bank)
            grid = VoxelGrid.zeros(cfg.grid.resolution, cfg.grid.channels)
        else:  # checkpoint: sample a fresh object and super-resolve a bank
            cams = ring_cameras(d.cameras, d.camera_radius, d.camera_elevation_deg,
                                d.image_size, cfg.scene.fov_y_deg)
            grid, _ = sample_scene(models, sched, [], rng, [],
                                   RenderConfig(samples_per_ray=d.samples_per_ray))
            bank = build_hypothesis_bank(models.superres, grid, models.decoder, cams,
                                         d.hypotheses, rng, sched, low_res_size=d.low_res_size,
                                         samples_per_ray=d.samples_per_ray)
            save_bank(out / "bank", bank)
            report.artifacts["bank"] = str(out / "bank")
        extra = {}
        if d.loss == "sds":
            conditioning = distill_conditioning(grid, models.decoder, bank.cameras,
                                                d.low_res_size,
                                                samples_per_ray=d.samples_per_ray)
            extra = dict(superres=models.superres, conditioning=conditioning, sched=sched)
        result = distill(grid, models.decoder, bank, _distill_config(cfg), **extra)
        save_grid(out / "distilled.hfvg", result.grid)
        report.metrics["mode"] = d.bank_source
        report.metrics["loss_first"] = result.losses[0] if result.losses else None
        report.metrics["loss_last"] = result.losses[-1] if result.losses else None
    report.artifacts["out_dir"] = str(out)


def _stage_ablate(cfg: ExperimentConfig, out: Path, report: Report):
    rows = _distill_oracle(cfg, out, report, variants=list(("patch-remix", "mse", "sds")))
    report.metrics["mode"] = "oracle"
    report.metrics["rows"] = rows


def _stage_heatmap(cfg: ExperimentConfig, out: Path, report: Report):
    rng = np.random.default_rng(cfg.seed)
    d = cfg.distill
    k = d.heatmap_hypotheses
    if cfg.paths.checkpoint:
        models = _load_models(cfg, rng)
        sched = _make_schedule(cfg)
        cams = ring_cameras(min(d.cameras, 4), d.camera_radius, d.camera_elevation_deg,
                            d.image_size, cfg.scene.fov_y_deg)
        grid, _ = sample_scene(models, sched, [], rng, [],
                               RenderConfig(samples_per_ray=d.samples_per_ray))
        bank = build_hypothesis_bank(models.superres, grid, models.decoder, cams,
                                     k, rng, sched, low_res_size=d.low_res_size,
                                     samples_per_ray=d.samples_per_ray)
        masks = None
    else:
        # demo mode: corruption confined to a known square mask
        spec, gt_grid, gt_decoder, bank0, images = oracle_bank(cfg, cfg.seed)
        cams = bank0.cameras[: min(4, len(bank0.cameras))]
        images = images[: len(cams)]
        h = images[0].shape[0]
        mask = np.zeros(images[0].shape[:2], dtype=bool)
        mask[h // 4 : h // 2, h // 4 : h // 2] = True
        stacks = []
        for image in images:
            hyps = []
            for _j in range(k):
                noisy = image + 0.3 * mask[:, :, None] * rng.standard_normal(image.shape)
                noisy += 1e-4 * rng.standard_normal(image.shape)
                hyps.append(np.clip(noisy, 0.0, 1.0))
            stacks.append(np.stack(hyps))
        bank = HypothesisBank(cameras=list(cams), hypotheses=stacks, k=k)
        masks = mask
    stats = []
    for ci in range(len(bank.cameras)):
        heat = variance_heatmap(bank, ci)
        save_image_raw(out / f"heatmap_{ci:02d}.raw", heat[:, :, None])
        peak = heat.max()
        save_image_png(out / f"heatmap_{ci:02d}.png", heat / peak if peak > 0 else heat)
        entry = {"camera": ci, "mean_variance": float(heat.mean()), "max_variance": float(peak)}
        if masks is not None:
            entry["mean_inside_mask"] = float(heat[masks].mean())
            entry["mean_outside_mask"] = float(heat[~masks].mean())
        stats.append(entry)
    report.metrics["heatmaps"] = stats
    report.metrics["hypotheses"] = k
    report.artifacts["out_dir"] = str(out)


def _stage_report(cfg: ExperimentConfig, out: Path, report: Report):
    path = cfg.paths.report or (out / "report.json")
    loaded = Report.load(path)
    report.metrics["loaded"] = loaded.to_dict()
    report.metrics["digest"] = loaded.digest()


_STAGES = {
    "make-scene": _stage_make_scene,
    "gradcheck": _stage_gradcheck,
    "train": _stage_train,
    "sample": _stage_sample,
    "distill": _stage_distill,
    "ablate": _stage_ablate,
    "heatmap": _stage_heatmap,
    "report": _stage_report,
}


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Execute the configured stage; always leaves a report in the out dir.

    On stage failure the partial report (status "failed", error message)
    is preserved before the exception propagates.
    """
    out = Path(cfg.paths.out_dir)
    report = Report(stage=cfg.stage, seed=cfg.seed, config_hash=cfg.hash())
    # the report-viewing stage must not clobber the report it is reading
    name = "report_view.json" if cfg.stage == "report" else "report.json"
    with output_lock(out):
        t0 = time.perf_counter()
        try:
            _STAGES[cfg.stage](cfg, out, report)
        except Exception as e:
            report.status = "failed"
            report.error = f"{type(e).__name__}: {e}"
            report.runtimes["total_s"] = time.perf_counter() - t0
            report.save(out / name)
            raise
        report.runtimes["total_s"] = time.perf_counter() - t0
        report.save(out / name)
    return report
