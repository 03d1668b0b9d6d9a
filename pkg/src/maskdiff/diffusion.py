"""Noise schedules, the forward corruption process, DDIM reverse steps
with classifier-free guidance, and the noise-prediction training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta/alpha/alpha_bar tables for T diffusion steps."""

    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at step t; the virtual step before 0 has alpha_bar 1."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.timesteps})")
        return float(self.alpha_bars[t])


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 7.5
    seed: int = 0

    def validate(self, schedule_steps: int) -> None:
        if self.num_inference_steps < 1 or self.num_inference_steps > schedule_steps:
            raise ConfigError(
                "sampler.num_inference_steps must lie in "
                f"[1, {schedule_steps}], got {self.num_inference_steps}"
            )
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"sampler.eta must lie in [0, 1], got {self.eta}")
        if self.guidance_scale < 0.0:
            raise ConfigError("sampler.guidance_scale must be non-negative")


def make_schedule(timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if timesteps < 1:
        raise ConfigError(f"timesteps must be positive, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(timesteps, betas, alphas, alpha_bars)


def spaced_timesteps(timesteps: int, num_steps: int) -> list[int]:
    """Evenly spaced inference subsequence, largest timestep first, ending at 0."""
    if not 1 <= num_steps <= timesteps:
        raise ConfigError(f"num_steps must lie in [1, {timesteps}], got {num_steps}")
    if num_steps == 1:
        return [timesteps - 1]
    seq = np.round(np.linspace(timesteps - 1, 0, num_steps)).astype(int)
    if np.any(np.diff(seq) >= 0):
        raise ConfigError("inference subsequence is not strictly decreasing")
    return [int(t) for t in seq]


def add_noise(z0: Tensor, eps: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    """Closed-form forward corruption: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"z0 and eps shapes differ: {z0.shape} vs {eps.shape}")
    ab = sched.alpha_bar(int(t))
    return T.add(T.scale(z0, math.sqrt(ab)), T.scale(eps, math.sqrt(1.0 - ab)))


def predict_x0(z_t: Tensor, eps_hat: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    """Invert the forward corruption given a noise estimate."""
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"z_t and eps_hat shapes differ: {z_t.shape} vs {eps_hat.shape}")
    ab = sched.alpha_bar(int(t))
    if ab <= 0.0:
        raise NumericError(f"alpha_bar at t={t} is not positive")
    return T.scale(
        T.sub(z_t, T.scale(eps_hat, math.sqrt(1.0 - ab))), 1.0 / math.sqrt(ab)
    )


def ddim_step(
    z_t: Tensor,
    eps_hat: Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """One DDIM update from step t to t_prev (t_prev may be the virtual -1)."""
    if t_prev >= t:
        raise ValueError(f"t_prev must be below t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    ab_t = sched.alpha_bar(int(t))
    ab_prev = sched.alpha_bar(int(t_prev))

    x0_hat = predict_x0(z_t, eps_hat, t, sched)
    if eta > 0.0:
        var_ratio = (1.0 - ab_prev) / (1.0 - ab_t)
        jump = 1.0 - ab_t / ab_prev
        if var_ratio < 0.0 or jump < 0.0:
            raise NumericError(
                f"negative variance radicand at t={t}->{t_prev}; "
                "the schedule is misconfigured"
            )
        sigma = eta * math.sqrt(var_ratio) * math.sqrt(jump)
    else:
        sigma = 0.0
    radicand = 1.0 - ab_prev - sigma**2
    if radicand < -1e-12:
        raise NumericError(
            f"negative direction radicand at t={t}->{t_prev}: {radicand}"
        )
    direction = T.scale(eps_hat, math.sqrt(max(radicand, 0.0)))
    out = T.add(T.scale(x0_hat, math.sqrt(ab_prev)), direction)
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 needs an rng for the stochastic term")
        xi = rng.standard_normal(z_t.shape)
        out = T.add(out, Tensor(sigma * xi))
    return out


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, s: float) -> Tensor:
    """Classifier-free guidance: eps_u + s (eps_c - eps_u)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(
            f"guidance operands differ: {eps_uncond.shape} vs {eps_cond.shape}"
        )
    if s < 0.0:
        raise ConfigError(f"guidance scale must be non-negative, got {s}")
    return T.add(eps_uncond, T.scale(T.sub(eps_cond, eps_uncond), s))


def diffusion_loss(
    model,
    z0: np.ndarray,
    cond: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    generators: Optional[Sequence] = None,
    cond_dropout: float = 0.0,
) -> Tensor:
    """Noise-prediction MSE on a batch, differentiable through the model
    (and through attached mask generators).

    Draw order, relied on by reproducibility tests: per-example timesteps,
    then the noise matrix, then (if cond_dropout > 0) the dropout uniforms,
    then any mask-generator noise.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 2 or len(z0) == 0:
        raise ValueError("batch must be a non-empty (n, d) array")
    cond = np.asarray(cond, dtype=np.int64)
    n = len(z0)

    t = rng.integers(0, sched.timesteps, size=n)
    eps = rng.standard_normal(z0.shape)
    if cond_dropout > 0.0:
        drop = rng.random(n) < cond_dropout
        cond = np.where(drop, model.config.num_classes, cond)

    coeff_sig = np.sqrt(sched.alpha_bars[t])[:, None]
    coeff_noise = np.sqrt(1.0 - sched.alpha_bars[t])[:, None]
    z_t = Tensor(coeff_sig * z0 + coeff_noise * eps)

    masks = None
    if generators:
        from .maskgen import generate_masks

        masks = generate_masks(generators, t, z_t, hard=True, rng=rng)
    eps_hat = model.forward(z_t, t, cond, masks=masks)
    return T.mse(eps_hat, Tensor(eps))
