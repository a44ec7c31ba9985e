"""Conditioning control branches: half-width encoder copies with zero-init
residual outputs.

A control branch consumes the noisy frames plus a conditioning raster (pose
or face map) and produces one residual per backbone injection point (both
encoder stages and the middle block).  Every residual passes through a
zero-initialized 1x1 projection, so a fresh branch is a strict no-op for any
input, including blank maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ArchConfig
from .errors import ParameterError, ShapeError
from .attention import AttentionLayer, self_attention
from .unet import ResBlock, timestep_embedding, zero_module


@dataclass
class ControlMap:
    """Per-frame conditioning raster in [0, 1].

    ``blank`` marks clips whose conditioning is deliberately absent (scene
    clips, live-photo generation); a blank map must be all-zero.
    """

    raster: torch.Tensor  # [F, C, H, W]
    kind: str             # "pose" | "face"
    blank: bool = False

    def __post_init__(self):
        if self.kind not in ("pose", "face"):
            raise ParameterError(f"control map kind must be 'pose' or 'face', got {self.kind!r}")
        if self.raster.ndim != 4:
            raise ShapeError(f"control raster must be [F, C, H, W], got {tuple(self.raster.shape)}")
        if self.blank and bool((self.raster != 0).any()):
            raise ParameterError("blank control map must have an all-zero raster")

    @classmethod
    def blank_map(
        cls, kind: str, frames: int, height: int, width: int,
        channels: int = 3, dtype: torch.dtype = torch.float64,
    ) -> "ControlMap":
        return cls(torch.zeros(frames, channels, height, width, dtype=dtype), kind, blank=True)


class ControlNet(nn.Module):
    """Half-width copy of the backbone encoder with zero-init output heads."""

    def __init__(self, cfg: ArchConfig, ctrl_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.ctrl_channels = ctrl_channels
        div = cfg.control_width_divisor
        w_lo = cfg.base_channels * cfg.channel_mult[0] // div
        w_hi = cfg.base_channels * cfg.channel_mult[-1] // div
        ch_lo = cfg.base_channels * cfg.channel_mult[0]
        ch_hi = cfg.base_channels * cfg.channel_mult[-1]
        groups = max(1, cfg.norm_groups // div)
        temb = cfg.temb_dim

        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.hint_conv1 = nn.Conv2d(ctrl_channels, w_lo, 3, padding=1)
        self.hint_conv2 = nn.Conv2d(w_lo, w_lo, 3, padding=1)
        self.conv_in = nn.Conv2d(cfg.in_channels, w_lo, 3, padding=1)
        self.res0 = ResBlock(w_lo, w_lo, temb, groups)
        self.down = nn.Conv2d(w_lo, w_hi, 3, stride=2, padding=1)
        self.res1 = ResBlock(w_hi, w_hi, temb, groups)
        self.attn_norm = nn.LayerNorm(w_hi)
        self.attn = AttentionLayer(w_hi)
        self.mid_res = ResBlock(w_hi, w_hi, temb, groups)
        self.zero_out0 = nn.Conv2d(w_lo, ch_lo, 1)
        self.zero_out1 = nn.Conv2d(w_hi, ch_hi, 1)
        self.zero_out2 = nn.Conv2d(w_hi, ch_hi, 1)
        self.apply_zero_init()

    @torch.no_grad()
    def apply_zero_init(self) -> None:
        for head in (self.zero_out0, self.zero_out1, self.zero_out2):
            zero_module(head)

    def _transformer(self, h: torch.Tensor) -> torch.Tensor:
        frames, ch, height, width = h.shape
        tokens = h.reshape(frames, ch, height * width).transpose(1, 2)
        tokens = tokens + self_attention(self.attn, self.attn_norm(tokens))
        return tokens.transpose(1, 2).reshape(frames, ch, height, width)

    def forward(
        self, ctrl: ControlMap | torch.Tensor, x_t: torch.Tensor, t: int
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        raster = ctrl.raster if isinstance(ctrl, ControlMap) else ctrl
        if raster.shape[0] != x_t.shape[0] or raster.shape[2:] != x_t.shape[2:]:
            raise ShapeError(
                f"control raster {tuple(raster.shape)} does not match frames {tuple(x_t.shape)}"
            )
        if raster.shape[1] != self.ctrl_channels:
            raise ShapeError(
                f"control raster has {raster.shape[1]} channels, branch expects {self.ctrl_channels}"
            )
        temb = self.time_mlp(
            timestep_embedding(torch.tensor([float(t)], dtype=x_t.dtype), self.cfg.temb_dim)
        )
        hint = self.hint_conv2(torch.nn.functional.silu(self.hint_conv1(raster.to(x_t.dtype))))
        h = self.conv_in(x_t) + hint
        h0 = self.res0(h, temb)
        h1 = self.res1(self.down(h0), temb)
        h1 = self._transformer(h1)
        h2 = self.mid_res(h1, temb)
        return self.zero_out0(h0), self.zero_out1(h1), self.zero_out2(h2)
