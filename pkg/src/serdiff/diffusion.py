"""Gaussian diffusion over error maps: schedule, corruption, teacher objective, sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .nets import Denoiser


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64 [T], betas[t - 1] is beta_t

    def __post_init__(self) -> None:
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 2:
            raise ValueError("a schedule needs at least two steps")
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def check_t(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return int(t)

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_t(t) - 1])


def linear_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def q_step(x_prev: torch.Tensor, t: int, sched: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """One forward corruption step x_{t-1} -> x_t."""
    if noise.shape != x_prev.shape:
        raise ValueError("noise must match x_prev in shape")
    beta = sched.beta(t)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def q_closed(x0: torch.Tensor, t: int, sched: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """Sample x_t directly from x_0 via the cumulative product of alphas."""
    if noise.shape != x0.shape:
        raise ValueError("noise must match x0 in shape")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def q_closed_batch(x0: torch.Tensor, t: torch.Tensor, sched: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """Per-example timesteps ``t`` (1-based, shape [B])."""
    ab = torch.as_tensor(sched.alpha_bars, dtype=x0.dtype)[t - 1].view(-1, *([1] * (x0.ndim - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def teacher_loss(
    model: Denoiser,
    x0: torch.Tensor,
    c: torch.Tensor,
    t,
    noise: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Noise-prediction MSE at step(s) ``t`` (an int or a [B] tensor)."""
    if isinstance(t, int):
        x_t = q_closed(x0, t, sched, noise)
    else:
        x_t = q_closed_batch(x0, torch.as_tensor(t), sched, noise)
    return F.mse_loss(model(x_t, t, c), noise)


@dataclass
class ErrorMap:
    values: torch.Tensor  # [C, H, W] or [B, C, H, W], within [-1, 1]
    source: Literal["computed", "synthetic"]


def compute_error_map(logits: torch.Tensor, gt: torch.Tensor) -> ErrorMap:
    """Signed residual ``gt - softmax(logits)`` along the class axis."""
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(gt.shape)}")
    class_dim = 0 if logits.ndim == 3 else 1
    return ErrorMap(gt - torch.softmax(logits, dim=class_dim), "computed")


def _normal(shape, gens: list[torch.Generator], dtype) -> torch.Tensor:
    if len(gens) == 1:
        return torch.randn(shape, generator=gens[0], dtype=dtype)
    return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in gens])


@torch.no_grad()
def p_sample(
    model: Denoiser,
    c: torch.Tensor,
    sched: NoiseSchedule,
    seed: int | Sequence[int],
    clamp: bool = True,
) -> ErrorMap:
    """Ancestral sampling from t=T down to 1 with fixed variance beta_t.

    ``c`` is [4, H, W] or a batch [B, 4, H, W]; the output matches its batching.
    A sequence of seeds gives every batch element its own noise stream.
    """
    single = c.ndim == 3
    if single:
        c = c[None]
    seeds = [seed] if isinstance(seed, int) else list(seed)
    if len(seeds) not in (1, c.shape[0]):
        raise ValueError("need one seed, or one seed per batch element")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    shape = (c.shape[0], model.config.n_out_channels, *c.shape[-2:])
    x = _normal(shape, gens, c.dtype)
    for t in range(sched.T, 0, -1):
        beta = sched.beta(t)
        ab = sched.alpha_bar(t)
        eps = model(x, t, c)
        x = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        if t > 1:
            x = x + math.sqrt(beta) * _normal(shape, gens, c.dtype)
    if clamp:
        x = x.clamp(-1.0, 1.0)
    return ErrorMap(x[0] if single else x, "synthetic")
