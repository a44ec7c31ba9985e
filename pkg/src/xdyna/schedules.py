"""Forward-noising schedule: linear betas and the closed-form corruption.

The forward process corrupts a clean clip ``x0`` at step ``t`` as

    x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps

with ``alpha_bar[t] = prod_{s<=t} (1 - beta[s])`` and betas linearly spaced
between ``beta_start`` and ``beta_end`` inclusive.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import ScheduleConfig
from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances and their cumulative signal fractions."""

    betas: torch.Tensor      # [T], each in (0, 1)
    alpha_bars: torch.Tensor  # [T], strictly decreasing

    @property
    def timesteps(self) -> int:
        return self.betas.shape[0]

    def validate(self) -> None:
        if not bool(((self.betas > 0) & (self.betas < 1)).all()):
            raise ParameterError("betas must lie strictly inside (0, 1)")
        if self.timesteps > 1 and not bool((self.alpha_bars[1:] < self.alpha_bars[:-1]).all()):
            raise ParameterError("alpha_bars must be strictly decreasing")


def make_noise_schedule(
    timesteps: int, beta_start: float, beta_end: float, dtype: torch.dtype = torch.float64
) -> NoiseSchedule:
    """Linear beta schedule with endpoints included.

    For ``timesteps == 1`` the single beta equals ``beta_start``.
    """
    if timesteps < 1:
        raise ParameterError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if timesteps == 1:
        betas = torch.tensor([beta_start], dtype=dtype)
    else:
        betas = torch.linspace(beta_start, beta_end, timesteps, dtype=dtype)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    schedule = NoiseSchedule(betas=betas, alpha_bars=alpha_bars)
    schedule.validate()
    return schedule


def schedule_from_config(cfg: ScheduleConfig, dtype: torch.dtype = torch.float64) -> NoiseSchedule:
    return make_noise_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, dtype=dtype)


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward corruption of a clean clip at step ``t``."""
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != clip shape {tuple(x0.shape)}")
    if not (0 <= t < schedule.timesteps):
        raise ParameterError(f"t={t} outside schedule range [0, {schedule.timesteps})")
    a_bar = schedule.alpha_bars[t].to(x0.dtype)
    return torch.sqrt(a_bar) * x0 + torch.sqrt(1.0 - a_bar) * eps
