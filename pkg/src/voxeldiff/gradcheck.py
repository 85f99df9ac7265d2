"""Finite-difference verification of every primitive and the full pipeline.

Each check builds a small ComputeGraph whose scalar output is a fixed
random projection of the op result, then compares analytic gradients
against central differences.  Inputs are seeded uniforms in [-2, 2]
(nudged away from the relu kink, where the derivative is genuinely
discontinuous).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conv as C
from . import tensor as T
from .autodiff import ComputeGraph, grad_check
from .bilinear import bilinear_sample
from .field import FieldDecoder, VoxelGrid, trilinear_sample
from .generation import build_models
from .render import Camera, RenderConfig, render
from .schedule import make_schedule, q_sample
from .tensor import Tensor
from .unproject import PosedImage, encode_frames, unproject

PRIMITIVE_TOL = 1e-6
PIPELINE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.threshold


def _uniform(rng, shape, avoid_zero=0.0):
    x = rng.uniform(-2.0, 2.0, size=shape)
    if avoid_zero:
        x = np.where(np.abs(x) < avoid_zero, avoid_zero * np.sign(x) + (x == 0) * avoid_zero, x)
    return x


def _projected(op):
    """Wrap an op result into a scalar via a fixed random projection."""

    def fn_factory(proj):
        def fn(params, _inputs):
            out = op(params)
            if out.data.ndim == 0:
                return out
            return T.tensor_sum(T.mul(out, Tensor(proj)))

        return fn

    return fn_factory


def _check(name, params, op, rng, threshold=PRIMITIVE_TOL, step=1e-5):
    graph_params = {k: Tensor(v) for k, v in params.items()}
    probe = op({k: Tensor(v) for k, v in params.items()})
    proj = rng.standard_normal(probe.data.shape)
    graph = ComputeGraph(_projected(op)(proj), graph_params)
    err = grad_check(graph, step=step)
    return CheckResult(name, err, threshold)


def primitive_checks(seed=0):
    """FD-verify every differentiable primitive; returns a list of results."""
    rng = np.random.default_rng(seed)
    results = []

    def add_check(name, params, op, threshold=PRIMITIVE_TOL):
        results.append(_check(name, params, op, rng, threshold))

    a, b = _uniform(rng, (3, 4)), _uniform(rng, (3, 4))
    add_check("add", {"a": a, "b": b}, lambda p: T.add(p["a"], p["b"]))
    add_check("sub", {"a": a, "b": b}, lambda p: T.sub(p["a"], p["b"]))
    add_check("mul", {"a": a, "b": b}, lambda p: T.mul(p["a"], p["b"]))
    add_check("mul_scalar", {"a": a}, lambda p: T.mul(p["a"], 1.7))
    add_check(
        "matmul",
        {"a": _uniform(rng, (3, 5)), "b": _uniform(rng, (5, 2))},
        lambda p: T.matmul(p["a"], p["b"]),
    )
    add_check("relu", {"a": _uniform(rng, (4, 4), avoid_zero=0.05)}, lambda p: T.relu(p["a"]))
    add_check("sigmoid", {"a": a}, lambda p: T.sigmoid(p["a"]))
    add_check("softplus", {"a": a}, lambda p: T.softplus(p["a"]))
    add_check("exp", {"a": a}, lambda p: T.exp(p["a"]))
    add_check("sum", {"a": a}, lambda p: T.tensor_sum(p["a"]))
    add_check("sum_axis", {"a": a}, lambda p: T.tensor_sum(p["a"], axis=1))
    add_check("mean", {"a": a}, lambda p: T.mean(p["a"]))
    add_check("cumsum", {"a": a}, lambda p: T.cumsum(p["a"], axis=1))
    add_check("reshape", {"a": a}, lambda p: T.reshape(p["a"], (4, 3)))
    add_check("permute", {"a": _uniform(rng, (2, 3, 4))}, lambda p: T.permute(p["a"], (2, 0, 1)))
    add_check("concat", {"a": a, "b": b}, lambda p: T.concat([p["a"], p["b"]], axis=0))
    add_check("narrow", {"a": a}, lambda p: T.narrow(p["a"], 1, 1, 2))
    add_check(
        "add_bias",
        {"a": _uniform(rng, (3, 5, 5)), "b": _uniform(rng, (3,))},
        lambda p: T.add_bias(p["a"], p["b"], axis=0),
    )
    add_check(
        "scale_rows",
        {"a": _uniform(rng, (6, 3)), "s": _uniform(rng, (6,))},
        lambda p: T.scale_rows(p["a"], p["s"]),
    )
    add_check(
        "conv2d",
        {"x": _uniform(rng, (2, 6, 6)), "w": _uniform(rng, (3, 2, 3, 3))},
        lambda p: C.conv2d(p["x"], p["w"]),
    )
    add_check(
        "conv2d_stride2",
        {"x": _uniform(rng, (2, 6, 6)), "w": _uniform(rng, (3, 2, 3, 3))},
        lambda p: C.conv2d(p["x"], p["w"], stride=2),
    )
    add_check(
        "conv3d",
        {"x": _uniform(rng, (2, 4, 4, 4)), "w": _uniform(rng, (3, 2, 3, 3, 3))},
        lambda p: C.conv3d(p["x"], p["w"]),
    )
    add_check(
        "conv3d_stride2",
        {"x": _uniform(rng, (2, 4, 4, 4)), "w": _uniform(rng, (3, 2, 3, 3, 3))},
        lambda p: C.conv3d(p["x"], p["w"], stride=2),
    )
    add_check(
        "upsample2d_nearest",
        {"x": _uniform(rng, (2, 3, 3))},
        lambda p: C.upsample2d_nearest(p["x"], 2),
    )
    add_check(
        "upsample3d_nearest",
        {"x": _uniform(rng, (2, 2, 2, 2))},
        lambda p: C.upsample3d_nearest(p["x"], 2),
    )

    # interpolation gathers, w.r.t. table values and w.r.t. points
    pts3 = rng.uniform(-0.8, 0.8, size=(7, 3))

    def tri_vals(p):
        grid = VoxelGrid(4, 2, p["v"])
        return trilinear_sample(grid, pts3)

    add_check("trilinear_gather_values", {"v": _uniform(rng, (2, 4, 4, 4))}, tri_vals)

    tri_grid_const = _uniform(rng, (2, 4, 4, 4))

    def tri_pts(p):
        grid = VoxelGrid(4, 2, Tensor(tri_grid_const))
        return trilinear_sample(grid, p["pts"])

    add_check("trilinear_gather_points", {"pts": pts3.copy()}, tri_pts)

    pts2 = rng.uniform(0.2, 3.8, size=(6, 2))

    def bil_vals(p):
        return bilinear_sample(p["m"], pts2)

    add_check("bilinear_gather_values", {"m": _uniform(rng, (3, 5, 5))}, bil_vals)

    fmap_const = _uniform(rng, (3, 5, 5))

    def bil_pts(p):
        return bilinear_sample(Tensor(fmap_const), p["pts"])

    add_check("bilinear_gather_points", {"pts": pts2.copy()}, bil_pts)

    # render photometric loss w.r.t. every grid feature (linear gather path
    # composed with the nonlinear decoder and compositing)
    results.append(render_loss_check(seed=seed + 1))
    return results


def render_loss_check(seed=0, grid_res=4, channels=3, image=8, samples=8):
    """FD over all grid features of a photometric render loss."""
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((channels, grid_res, grid_res, grid_res)) * 0.3
    decoder = FieldDecoder(channels, hidden=(6,), rng=np.random.default_rng(seed + 1))
    cam = Camera.look_at((0.2, 2.6, 0.7), (0, 0, 0), (0, 0, 1), 45.0, image, image, 1.0, 5.5)
    cfg = RenderConfig(samples_per_ray=samples)
    target = rng.random((image, image, 3))

    def fn(params, _inputs):
        grid = VoxelGrid(grid_res, channels, params["features"])
        out = render(grid, decoder, cam, cfg)
        diff = T.sub(out.image_t, Tensor(target))
        return T.mean(T.mul(diff, diff))

    graph = ComputeGraph(fn, {"features": Tensor(feats)})
    err = grad_check(graph, step=1e-5)
    return CheckResult("render_loss_grid_features", err, PIPELINE_TOL)


def pipeline_check(seed=0):
    """FD over all model parameters of the full photometric training graph.

    Desk-miniature sizes (4-cube grid, 8x8 images, 8 samples per ray, two
    source frames) keep the parameter count small enough for a complete
    central-difference sweep.
    """
    rng = np.random.default_rng(seed)
    models = build_models(
        grid_resolution=4,
        grid_channels=2,
        rng=rng,
        decoder_hidden=(4,),
        denoiser3d_base=2,
        denoiser2d_base=2,
        encoder_widths=(2, 2),
        accumulator_hidden=4,
    )
    sched = make_schedule(8)
    cams = [
        Camera.look_at((2.6 * np.cos(a), 2.6 * np.sin(a), 0.4), (0, 0, 0), (0, 0, 1),
                       45.0, 8, 8, 1.0, 5.5)
        for a in (0.3, 2.1, 4.4)
    ]
    images = [np.clip(rng.random((8, 8, 3)), 0, 1) for _ in cams]
    sources = [PosedImage(images[0], cams[0]), PosedImage(images[1], cams[1])]
    target = PosedImage(images[2], cams[2])

    # freeze all stochastic draws so the graph is a pure function of params
    d, s = models.grid_channels, models.grid_resolution
    v_noise = rng.standard_normal((d, s, s, s))
    t_vol = 5
    eps = rng.standard_normal((d, s, s, s))
    rcfg = RenderConfig(samples_per_ray=8)

    def fn(params, _inputs):
        maps = encode_frames(models.encoder, sources)
        cond = unproject(maps, [f.camera for f in sources], models.grid_spec(),
                         models.accumulator)
        v0 = models.volume_denoiser(Tensor(v_noise), cond, sched.steps)
        v_t = q_sample(v0, t_vol, eps, sched)
        v0_hat = models.volume_denoiser(v_t, cond, t_vol)
        grid = VoxelGrid(s, d, v0_hat)
        out = render(grid, models.decoder, target.camera, rcfg)
        diff = T.sub(out.image_t, Tensor(target.image))
        return T.mean(T.mul(diff, diff))

    graph = ComputeGraph(fn, models.parameters())
    err = grad_check(graph, step=1e-5)
    return CheckResult("full_photometric_training_graph", err, PIPELINE_TOL)


def run_all_checks(seed=0):
    """Primitive checks plus the full pipeline graph; list of CheckResult."""
    results = primitive_checks(seed)
    results.append(pipeline_check(seed))
    return results
