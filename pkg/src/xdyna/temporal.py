"""Temporal attention: per-pixel-location mixing across the frame axis.

Each insertion point owns bias-free Q/K/V/O projections and a fixed
sinusoidal frame-position table.  The output projection is zero-initialized
so a fresh module is an exact identity, leaving the image model's behavior
untouched until training moves it.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .attention import attend
from .errors import ConfigurationError


def sinusoidal_table(length: int, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard transformer position encoding table [length, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1)
    )
    args = torch.arange(length, dtype=torch.float64)[:, None] * freqs[None, :]
    table = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        table = torch.cat([table, torch.zeros(length, 1, dtype=torch.float64)], dim=-1)
    return table


class TemporalAttention(nn.Module):
    """Attention across frames, applied independently at every token position.

    Input/output shape ``[frames, tokens, d_model]``; the residual is added
    inside, so the module maps ``z -> z + attn(z + pos)``.
    """

    def __init__(self, d_model: int, max_frames: int):
        super().__init__()
        self.d_model = d_model
        self.max_frames = max_frames
        self.to_q = nn.Linear(d_model, d_model, bias=False)
        self.to_k = nn.Linear(d_model, d_model, bias=False)
        self.to_v = nn.Linear(d_model, d_model, bias=False)
        self.to_out = nn.Linear(d_model, d_model, bias=False)
        self.register_buffer("position_table", sinusoidal_table(max_frames, d_model))

    @torch.no_grad()
    def zero_output_projection(self) -> None:
        self.to_out.weight.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return temporal_attention(self, z)


class TemporalModule(nn.Module):
    """One temporal attention layer per backbone attention site."""

    def __init__(self, d_model: int, max_frames: int, sites: int = 3):
        super().__init__()
        self.layers = nn.ModuleList(TemporalAttention(d_model, max_frames) for _ in range(sites))

    @torch.no_grad()
    def apply_zero_init(self) -> None:
        for layer in self.layers:
            layer.zero_output_projection()


def temporal_attention(params: TemporalAttention, z: torch.Tensor) -> torch.Tensor:
    """Frame-axis attention with position encoding, residual added.

    ``z`` is ``[F, tokens, d_model]``; every token position attends over its
    own F-length frame sequence.
    """
    frames = z.shape[0]
    if frames > params.position_table.shape[0]:
        raise ConfigurationError(
            f"clip has {frames} frames but the position table holds "
            f"{params.position_table.shape[0]}"
        )
    pos = params.position_table[:frames].to(z.dtype)
    seq = z.transpose(0, 1) + pos  # [tokens, F, d_model]
    out = attend(params.to_q(seq), params.to_k(seq), params.to_v(seq))
    return z + params.to_out(out).transpose(0, 1)
