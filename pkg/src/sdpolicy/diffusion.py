"""DDPM noise schedule, forward noising, noise-prediction loss and sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import GradTape, ShapeError, check_finite


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64 [T_D]

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def posterior_variance(self) -> np.ndarray:
        ab = self.alpha_bar
        prev = np.concatenate([[1.0], ab[:-1]])
        return self.betas * (1.0 - prev) / (1.0 - ab)


def make_schedule(kind: str = "linear", steps: int = 100,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ValueError("T_D must be >= 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    elif kind == "cosine":
        # squared-cosine alpha_bar, betas capped at 0.999
        def f(t):
            return math.cos((t / steps + 0.008) / 1.008 * math.pi / 2) ** 2

        betas = np.array([min(1 - f(i + 1) / f(i), 0.999) for i in range(steps)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas)


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab[t]) x0 + sqrt(1 - ab[t]) eps`` with per-sample ``t``."""
    if x0.shape != eps.shape:
        raise ShapeError("x0 and eps shapes differ")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.steps):
        raise IndexError(f"diffusion step out of range [0, {sched.steps})")
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    a = np.sqrt(ab).astype(x0.dtype)
    b = np.sqrt(1.0 - ab).astype(x0.dtype)
    return a * x0 + b * eps


@dataclass
class DiffusionBatch:
    x0: np.ndarray  # [B, H, D_a]
    obs: np.ndarray  # [B, obs_dim]
    t: np.ndarray  # [B]
    eps: np.ndarray  # [B, H, D_a]

    @classmethod
    def sample(cls, x0, obs, sched: NoiseSchedule, rng: np.random.Generator) -> "DiffusionBatch":
        t = rng.integers(0, sched.steps, size=x0.shape[0])
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
        return cls(x0, obs, t, eps)


def loss_eps_mse(net, batch: DiffusionBatch, sched: NoiseSchedule, backward: bool = True,
                 smooth: bool = False):
    """Mean squared error between sampled and predicted noise.

    Returns ``(loss, grads)``; ``grads`` is None when ``backward`` is False.
    """
    x_t = forward_diffuse(batch.x0, batch.t, batch.eps, sched)
    tape = GradTape() if backward else None
    pred = net.forward(x_t, batch.t, batch.obs, tape, smooth=smooth)
    if pred.shape != batch.eps.shape:
        raise ShapeError("network output shape differs from noise shape")
    diff = pred - batch.eps
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    check_finite(np.asarray(loss), "loss")
    if not backward:
        return loss, None
    grad = (2.0 / diff.size) * diff
    return loss, net.backward(grad.astype(pred.dtype), tape)


def ddpm_sample(
    denoiser: Callable[[np.ndarray, int, np.ndarray], np.ndarray],
    obs: np.ndarray,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    rng_seed: int | np.random.Generator = 0,
    clip_sample: bool = False,
    dtype=np.float32,
) -> np.ndarray:
    """Ancestral sampling from ``x_{T_D} ~ N(0, I)`` down to ``x_0``.

    ``denoiser(x_t, t, obs)`` returns the predicted noise. With
    ``clip_sample`` the implied clean sample is clipped to [-1, 1] at every
    step and the posterior mean is formed from it (identical to the
    noise-form mean when nothing is clipped).
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    betas, alphas, ab = sched.betas, sched.alphas, sched.alpha_bar
    var = sched.posterior_variance()
    x = rng.standard_normal(shape).astype(dtype)
    for t in range(sched.steps - 1, -1, -1):
        eps = denoiser(x, t, obs).astype(np.float64)
        xt = x.astype(np.float64)
        if clip_sample:
            ab_prev = ab[t - 1] if t > 0 else 1.0
            x0 = np.clip((xt - math.sqrt(1 - ab[t]) * eps) / math.sqrt(ab[t]), -1.0, 1.0)
            mean = (math.sqrt(ab_prev) * betas[t] / (1 - ab[t])) * x0 + (
                math.sqrt(alphas[t]) * (1 - ab_prev) / (1 - ab[t])
            ) * xt
        else:
            mean = (xt - betas[t] / math.sqrt(1 - ab[t]) * eps) / math.sqrt(alphas[t])
        if t > 0:
            mean = mean + math.sqrt(var[t]) * rng.standard_normal(shape)
        x = mean.astype(dtype)
    return x
