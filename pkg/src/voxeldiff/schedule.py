"""Noising schedule, closed-form forward noising, and ancestral sampling.

The per-step retention factors a_t = 1 - b_t come from a linear b ramp;
abar_t is their running product with the convention abar_0 = 1, so the
final reverse step is deterministic.  All operations work on plain
arrays or on tape tensors (the noising path is differentiable when its
input is).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tensor import Tensor

ALPHA_BAR_FINAL_MAX = 0.01


@dataclass(frozen=True)
class NoiseSchedule:
    """Retention factors alpha[t] and cumulative products alpha_bar[t], 1-based."""

    steps: int
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def a(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def abar(self, t: int) -> float:
        """alpha_bar at step t, with abar(0) == 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ValidationError(f"timestep {t} outside [1, {self.steps}]")


def make_schedule(steps: int, kind="linear", beta_min=None, beta_max=None) -> NoiseSchedule:
    """Linear beta schedule; defaults scale [1e-4, 0.02] by 1000/steps.

    The scaling keeps abar at the final step below 0.01 for short desk
    scale chains; a schedule that stays above that bound only warns (tiny
    test chains are legitimate).
    """
    if kind != "linear":
        raise ValidationError(f"unknown schedule kind {kind!r}")
    if steps < 1:
        raise ValidationError("schedule needs at least one step")
    if beta_min is None:
        beta_min = min(1e-4 * 1000.0 / steps, 0.5)
    if beta_max is None:
        beta_max = min(0.02 * 1000.0 / steps, 0.999)
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValidationError(f"invalid beta range [{beta_min}, {beta_max}]")
    beta = np.linspace(beta_min, beta_max, steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[-1] > ALPHA_BAR_FINAL_MAX:
        warnings.warn(
            f"final alpha_bar {alpha_bar[-1]:.4g} > {ALPHA_BAR_FINAL_MAX}; "
            "terminal noise is not close to unit Gaussian",
            stacklevel=2,
        )
    return NoiseSchedule(steps=steps, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form noising: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    abar = sched.abar(t)
    c0, ce = math.sqrt(abar), math.sqrt(1.0 - abar)
    if isinstance(x0, Tensor):
        eps_t = eps if isinstance(eps, Tensor) else Tensor(eps)
        if eps_t.data.shape != x0.data.shape:
            raise ValidationError("q_sample: eps shape mismatch")
        return x0 * c0 + eps_t * ce
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValidationError("q_sample: eps shape mismatch")
    return c0 * x0 + ce * eps


def p_sample_step(x_t, t: int, x0_hat, sched: NoiseSchedule, noise):
    """One reverse step: sqrt(abar_{t-1}) * x0_hat + sqrt(1 - abar_{t-1}) * noise.

    At t=1 the previous abar is 1, so the step returns x0_hat exactly.
    """
    sched._check_t(t)
    abar_prev = sched.abar(t - 1)
    c0, cn = math.sqrt(abar_prev), math.sqrt(1.0 - abar_prev)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0_hat.shape:
        raise ValidationError("p_sample_step: noise shape mismatch")
    return c0 * x0_hat + cn * noise


def loss_weight(t: int, sched: NoiseSchedule) -> float:
    """Closed-form denoising loss coefficient abar_{t-1} / (2 (1-abar_{t-1})^2).

    Defined for t >= 2; at t=1 the previous abar is 1 and the coefficient
    has a pole, so callers fall back to weight 1 there.
    """
    sched._check_t(t)
    if t < 2:
        raise ValidationError("loss_weight needs t >= 2 (use weight 1 at t=1)")
    abar_prev = sched.abar(t - 1)
    return abar_prev / (2.0 * (1.0 - abar_prev) ** 2)


def ancestral_sample(denoiser, shape, sched: NoiseSchedule, rng: np.random.Generator):
    """Full reverse chain from unit Gaussian noise; returns the clean sample.

    ``denoiser(x_t, t)`` must return the clean estimate with x_t's shape.
    """
    x = rng.standard_normal(shape)
    for t in range(sched.steps, 0, -1):
        x0_hat = np.asarray(denoiser(x, t), dtype=np.float64)
        if x0_hat.shape != x.shape:
            raise ValidationError("ancestral_sample: denoiser output shape mismatch")
        noise = rng.standard_normal(shape) if t > 1 else np.zeros(shape)
        x = p_sample_step(x, t, x0_hat, sched, noise)
    return x
