"""Noise schedule, forward noising, denoising loss and the guided DDPM sampler.

Timesteps are 1-based: ``t = 1`` is the least noisy step and ``t = T`` the
noisiest. Schedule arrays are stored 0-based, so ``alpha_bars[t - 1]`` is
the cumulative product up to ``t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import OutOfRangeError, ShapeError, ValidationError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValidationError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValidationError("every beta must lie in (0, 1)")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        alpha_bars = np.cumprod(alphas)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def n_steps(self) -> int:
        return self.betas.size

    def check_t(self, t: int):
        if not 1 <= t <= self.n_steps:
            raise OutOfRangeError(f"timestep {t} outside [1, {self.n_steps}]")

    def alpha_bar(self, t: int) -> float:
        self.check_t(t)
        return float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "betas": [float(b) for b in self.betas]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        if "betas" in data:
            return cls(np.asarray(data["betas"], dtype=np.float64))
        return make_noise_schedule(
            int(data["n_steps"]), float(data["beta_start"]), float(data["beta_end"])
        )


def make_noise_schedule(n_steps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule."""
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValidationError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, n_steps))


def rescaled_noise_schedule(
    n_steps: int, beta_start: float = 1e-4, beta_end: float = 2e-2, reference_steps: int = 1000
) -> NoiseSchedule:
    """Linear schedule whose endpoints are scaled by ``reference_steps / n_steps``.

    Short chains otherwise never reach pure noise: 50 unscaled steps stop at
    ``abar_T ~ 0.6``. Scaling keeps ``abar_T`` close to the reference chain's.
    """
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    k = reference_steps / n_steps
    return make_noise_schedule(n_steps, beta_start * k, min(beta_end * k, 0.999))


@dataclass(frozen=True, eq=False)
class ConditionEmbedding:
    """Conditioning vector; the null condition is the zero vector."""

    z_x: np.ndarray
    null: bool = False

    def __post_init__(self):
        z = np.array(self.z_x, dtype=np.float64).ravel()
        if not np.all(np.isfinite(z)):
            raise ValidationError("condition embedding must be finite")
        z.setflags(write=False)
        object.__setattr__(self, "z_x", z)

    @property
    def dim(self) -> int:
        return self.z_x.size

    def null_like(self) -> "ConditionEmbedding":
        return null_condition(self.dim)


def make_condition(vector) -> ConditionEmbedding:
    v = np.asarray(vector, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValidationError("cannot normalise a zero condition vector; use null_condition")
    return ConditionEmbedding(v / norm)


def null_condition(dim: int) -> ConditionEmbedding:
    return ConditionEmbedding(np.zeros(dim), null=True)


def noise_latent(z0, eps, alpha_bar: float):
    return np.sqrt(alpha_bar) * z0 + np.sqrt(1.0 - alpha_bar) * eps


def forward_noise(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} != latent shape {z0.shape}")
    return noise_latent(z0, eps, schedule.alpha_bar(t))


NoiseModel = Callable[[np.ndarray, int, ConditionEmbedding], np.ndarray]


def diffusion_loss(
    model: NoiseModel,
    z0: np.ndarray,
    t: int,
    eps: np.ndarray,
    cond: ConditionEmbedding,
    schedule: NoiseSchedule,
) -> float:
    """Mean squared noise-prediction error at ``(z_t, t, cond)``."""
    z_t = forward_noise(z0, t, eps, schedule)
    pred = np.asarray(model(z_t, t, cond))
    if pred.shape != eps.shape:
        raise ShapeError(f"model output {pred.shape} != noise shape {eps.shape}")
    return float(np.mean((eps - pred) ** 2))


def guided_noise(model: NoiseModel, z_t, t, cond: ConditionEmbedding, cfg_scale: float):
    """Classifier-free guidance ``eps_u + s (eps_c - eps_u)``.

    ``s = 1`` and ``s = 0`` skip the unused branch, so they reproduce
    conditional-only and unconditional predictions bit for bit.
    """
    if cfg_scale == 1.0:
        return model(z_t, t, cond)
    uncond = model(z_t, t, cond.null_like())
    if cfg_scale == 0.0:
        return uncond
    return uncond + cfg_scale * (model(z_t, t, cond) - uncond)


def sample(
    model: NoiseModel,
    cond: ConditionEmbedding,
    schedule: NoiseSchedule,
    cfg_scale: Optional[float],
    seed: int,
    shape: tuple,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
    clip_x0: Optional[float] = None,
) -> np.ndarray:
    """DDPM ancestral sampling from ``z_T ~ N(0, I)``.

    ``cfg_scale=None`` runs the conditional branch only. The model is asked
    for timestep ``t`` so any timestep-dependent attention window follows the
    schedule. One noise draw per step regardless of the guidance branch, so
    trajectories depend only on ``seed`` and the model.

    Args:
        clip_x0: when set, the implied clean latent is clipped to
            ``[-clip_x0, clip_x0]`` before forming the posterior mean. ``None``
            gives the plain ancestral update.
    """
    if cfg_scale is not None and cfg_scale < 0:
        raise ValidationError(f"cfg_scale must be >= 0, got {cfg_scale}")
    if clip_x0 is not None and not clip_x0 > 0:
        raise ValidationError(f"clip_x0 must be > 0, got {clip_x0}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape)
    for t in range(schedule.n_steps, 0, -1):
        if cfg_scale is None:
            eps_hat = model(z, t, cond)
        else:
            eps_hat = guided_noise(model, z, t, cond, cfg_scale)
        beta = schedule.betas[t - 1]
        abar = schedule.alpha_bars[t - 1]
        if clip_x0 is None:
            mean = (z - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(schedule.alphas[t - 1])
        else:
            abar_prev = schedule.alpha_bars[t - 2] if t > 1 else 1.0
            x0 = np.clip((z - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar), -clip_x0, clip_x0)
            mean = (
                np.sqrt(abar_prev) * beta / (1.0 - abar) * x0
                + np.sqrt(schedule.alphas[t - 1]) * (1.0 - abar_prev) / (1.0 - abar) * z
            )
        noise = rng.standard_normal(shape)
        if t > 1:
            var = beta * (1.0 - schedule.alpha_bars[t - 2]) / (1.0 - abar)
            z = mean + np.sqrt(var) * noise
        else:
            z = mean
        if callback is not None:
            callback(t, z)
    return z
