"""Epsilon-prediction UNet over pixel-space clips.

Two resolutions (full and half), base width at full resolution, one
transformer block per attention site: encoder at half resolution, middle,
and decoder at half resolution.  Each transformer block holds a spatial
self-attention (where the reference-appearance mechanisms attach), a
cross-attention over conditioning tokens (where the decoupled reference
branch attaches), and a slot for temporal attention.

The forward pass is a pure function of its inputs: no dropout, no running
statistics, no global state.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .attention import (
    AttentionLayer,
    cross_attention,
    dynamics_adapter_attention,
    ip_adapter_attention,
    refnet_concat_attention,
    self_attention,
)
from .config import ArchConfig
from .errors import ConfigurationError, ShapeError


def zero_module(module: nn.Module) -> nn.Module:
    """Zero all parameters of a module in place and return it."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, [N, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


@torch.no_grad()
def reset_module_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic re-initialization of every parameter of a module.

    Matrix-shaped weights get LeCun-normal values (std 1/sqrt(fan_in)),
    vector-shaped ``.weight`` entries (norm gains) become 1, biases become 0.
    Iteration is over sorted parameter names, so the draw sequence does not
    depend on construction order.
    """
    for name, p in sorted(module.named_parameters()):
        if p.ndim >= 2:
            fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1)
            p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=generator)
        elif name.endswith("weight"):
            p.fill_(1.0)
        else:
            p.zero_()


class ResBlock(nn.Module):
    """GroupNorm conv block with additive timestep conditioning."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class TransformerBlock(nn.Module):
    """Spatial self-attention + conditioning cross-attention at one site."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.channels = channels
        self.norm1 = nn.LayerNorm(channels)
        self.attn1 = AttentionLayer(channels)
        self.norm2 = nn.LayerNorm(channels)
        self.attn2 = AttentionLayer(channels, kv_dim=cond_dim)


class DenoisingUNet(nn.Module):
    """The frozen-backbone analogue with pluggable attachments.

    ``forward`` accepts the optional attachments; with none given (or with
    freshly zero-initialized ones) the computation reduces exactly to the
    plain backbone prediction.
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        ch_lo, ch_hi = base * cfg.channel_mult[0], base * cfg.channel_mult[-1]
        if len(cfg.channel_mult) != 2:
            raise ConfigurationError("this architecture uses exactly two resolutions")
        groups, temb = cfg.norm_groups, cfg.temb_dim
        cond = cfg.attention_channels

        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))

        self.conv_in = nn.Conv2d(cfg.in_channels, ch_lo, 3, padding=1)
        self.enc_res0 = ResBlock(ch_lo, ch_lo, temb, groups)
        self.down = nn.Conv2d(ch_lo, ch_hi, 3, stride=2, padding=1)
        self.enc_res1 = ResBlock(ch_hi, ch_hi, temb, groups)
        self.enc_block = TransformerBlock(ch_hi, cond)
        self.mid_res1 = ResBlock(ch_hi, ch_hi, temb, groups)
        self.mid_block = TransformerBlock(ch_hi, cond)
        self.mid_res2 = ResBlock(ch_hi, ch_hi, temb, groups)
        self.dec_res1 = ResBlock(ch_hi * 2, ch_hi, temb, groups)
        self.dec_block = TransformerBlock(ch_hi, cond)
        self.up = nn.Conv2d(ch_hi, ch_lo, 3, padding=1)
        self.dec_res0 = ResBlock(ch_lo * 2, ch_lo, temb, groups)
        self.out_norm = nn.GroupNorm(groups, ch_lo)
        self.conv_out = nn.Conv2d(ch_lo, cfg.in_channels, 3, padding=1)

    @property
    def transformer_blocks(self) -> list[TransformerBlock]:
        return [self.enc_block, self.mid_block, self.dec_block]

    @property
    def num_attention_sites(self) -> int:
        return 3

    def _run_transformer(
        self,
        site: int,
        h: torch.Tensor,
        cond_tokens: torch.Tensor,
        adapter_mode: str,
        reference,
        dynamics_adapter,
        ip_adapter,
        ip_tokens,
        temporal,
        capture_hidden,
    ) -> torch.Tensor:
        block = self.transformer_blocks[site]
        frames, ch, height, width = h.shape
        tokens = h.reshape(frames, ch, height * width).transpose(1, 2)

        z = block.norm1(tokens)
        if capture_hidden is not None:
            capture_hidden.append(z)
        if adapter_mode == "dynamics_adapter":
            layer_cache = reference.layers[site]
            out = dynamics_adapter_attention(
                block.attn1, dynamics_adapter.layers[site], z, layer_cache.k_r, layer_cache.v_r
            )
        elif adapter_mode == "refnet_concat":
            out = refnet_concat_attention(block.attn1, z, reference.layers[site].z_r)
        else:
            out = self_attention(block.attn1, z)
        tokens = tokens + out

        z = block.norm2(tokens)
        if adapter_mode == "ip_adapter" and ip_tokens is not None:
            out = ip_adapter_attention(
                block.attn2, ip_adapter.layers[site], z, cond_tokens, ip_tokens, ip_adapter.scale
            )
        else:
            out = cross_attention(block.attn2, z, cond_tokens)
        tokens = tokens + out

        if temporal is not None:
            tokens = temporal.layers[site](tokens)

        return tokens.transpose(1, 2).reshape(frames, ch, height, width)

    def forward(
        self,
        x: torch.Tensor,
        t: int,
        cond_tokens: torch.Tensor,
        *,
        adapter_mode: str = "none",
        reference=None,
        dynamics_adapter=None,
        ip_adapter=None,
        ip_tokens=None,
        temporal=None,
        control_residuals=None,
        capture_hidden: list | None = None,
    ) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected [F, {self.cfg.in_channels}, H, W] input, got {tuple(x.shape)}")
        if x.shape[2] != self.cfg.image_size or x.shape[3] != self.cfg.image_size:
            raise ShapeError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} frames, got "
                f"{x.shape[2]}x{x.shape[3]}"
            )
        if adapter_mode in ("dynamics_adapter", "refnet_concat"):
            if reference is None:
                raise ConfigurationError(f"adapter_mode {adapter_mode!r} requires a reference cache")
            if len(reference.layers) != self.num_attention_sites:
                raise ConfigurationError(
                    f"reference cache has {len(reference.layers)} layers, "
                    f"model has {self.num_attention_sites} attention sites"
                )
        if adapter_mode == "dynamics_adapter" and (
            dynamics_adapter is None or len(dynamics_adapter.layers) != self.num_attention_sites
        ):
            raise ConfigurationError("dynamics adapter missing or layer count mismatch")
        if adapter_mode == "ip_adapter" and (
            ip_adapter is None or len(ip_adapter.layers) != self.num_attention_sites
        ):
            raise ConfigurationError("ip adapter missing or layer count mismatch")
        if temporal is not None and len(temporal.layers) != self.num_attention_sites:
            raise ConfigurationError("temporal module layer count mismatch")
        if control_residuals is not None and len(control_residuals) != 3:
            raise ConfigurationError("expected 3 control residuals (two encoder stages + middle)")

        if cond_tokens.ndim == 2:
            cond_tokens = cond_tokens.unsqueeze(0).expand(x.shape[0], -1, -1)

        temb = self.time_mlp(
            timestep_embedding(torch.tensor([float(t)], dtype=x.dtype), self.cfg.temb_dim)
        )

        def run(site, h):
            return self._run_transformer(
                site, h, cond_tokens, adapter_mode, reference, dynamics_adapter,
                ip_adapter, ip_tokens, temporal, capture_hidden,
            )

        h = self.conv_in(x)
        skip_a = self.enc_res0(h, temb)
        if control_residuals is not None:
            skip_a = skip_a + control_residuals[0]
        h = self.down(skip_a)
        h = self.enc_res1(h, temb)
        skip_b = run(0, h)
        if control_residuals is not None:
            skip_b = skip_b + control_residuals[1]

        h = self.mid_res1(skip_b, temb)
        h = run(1, h)
        h = self.mid_res2(h, temb)
        if control_residuals is not None:
            h = h + control_residuals[2]

        h = self.dec_res1(torch.cat([h, skip_b], dim=1), temb)
        h = run(2, h)
        h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up(h)
        h = self.dec_res0(torch.cat([h, skip_a], dim=1), temb)
        return self.conv_out(torch.nn.functional.silu(self.out_norm(h)))
