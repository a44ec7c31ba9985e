"""Deterministic DDIM sampling (eta = 0).

The sampler walks a strictly increasing subsequence of schedule steps in
reverse.  At each visited step it forms the x0 estimate from the predicted
epsilon and re-noises to the previous visited step; the last step re-noises
to noise level zero, so with an exact epsilon predictor the clean signal is
recovered exactly.

The per-step x0 estimate is clamped to the pixel range by default: at high
noise levels the estimate divides by sqrt(alpha_bar), amplifying epsilon
errors by an order of magnitude, and an unclamped chain can leave the data
manifold beyond recovery.  Clamping is exact for targets inside [-1, 1],
so the closed-form recovery guarantee is unchanged.  The final sample is
clamped to [-1, 1].
"""

from __future__ import annotations

import numpy as np
import torch

from .determinism import torch_generator
from .errors import ParameterError
from .schedules import NoiseSchedule


def ddim_timesteps(total_steps: int, steps: int) -> list[int]:
    """Evenly spaced, deduplicated schedule indices ending at T - 1."""
    if not (1 <= steps <= total_steps):
        raise ParameterError(f"steps must satisfy 1 <= steps <= {total_steps}, got {steps}")
    ts = np.unique(np.round(np.linspace(0, total_steps - 1, steps)).astype(int))
    return [int(t) for t in ts]


def ddim_sample(
    eps_fn,
    schedule: NoiseSchedule,
    steps: int,
    shape: tuple[int, ...],
    seed: int,
    *,
    dtype: torch.dtype = torch.float64,
    initial_noise: torch.Tensor | None = None,
    clamp: bool = True,
    clamp_x0: bool = True,
) -> torch.Tensor:
    """Sample a clip by iterating ``eps_fn(x_t, t)`` down the schedule.

    ``seed`` fully determines the terminal Gaussian sample (ignored when
    ``initial_noise`` is given), so repeated calls are bit-identical.
    """
    ts = ddim_timesteps(schedule.timesteps, steps)
    if initial_noise is not None:
        x = initial_noise.to(dtype)
    else:
        x = torch.randn(shape, generator=torch_generator(seed, "ddim-init"), dtype=dtype)
    for i in range(len(ts) - 1, -1, -1):
        t = ts[i]
        a_t = schedule.alpha_bars[t].to(dtype)
        eps = eps_fn(x, t)
        x0 = (x - torch.sqrt(1.0 - a_t) * eps) / torch.sqrt(a_t)
        if clamp_x0:
            x0 = x0.clamp(-1.0, 1.0)
        a_prev = schedule.alpha_bars[ts[i - 1]].to(dtype) if i > 0 else torch.ones((), dtype=dtype)
        x = torch.sqrt(a_prev) * x0 + torch.sqrt(1.0 - a_prev) * eps
    return x.clamp(-1.0, 1.0) if clamp else x
