"""Reference-image encoding and the three appearance-conditioning modules.

The reference frame is passed clean (noise level zero) through an encoder
UNet once per generation; the per-attention-site hidden states and their
derived keys/values are cached and reused for every frame and every
denoising step.  Which network encodes depends on the adapter mode:

* ``dynamics_adapter`` — the frozen backbone itself (shared weights);
* ``refnet_concat``    — a full trainable copy of the backbone;
* ``ip_adapter``       — no per-layer cache; a pooled patch embedding is
  projected to a small number of conditioning tokens instead.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

from .attention import DynamicsAdapterLayer, IPAdapterLayer
from .errors import ShapeError
from .unet import DenoisingUNet

_encode_calls = 0


def encode_call_count() -> int:
    """Total number of reference-encoding passes (instrumentation hook)."""
    return _encode_calls


@dataclass(frozen=True)
class ReferenceLayerCache:
    z_r: torch.Tensor  # [tokens, d_model], hidden states entering self-attention
    k_r: torch.Tensor  # [tokens, d], z_r through the encoder layer's W_K
    v_r: torch.Tensor  # [tokens, d]


@dataclass(frozen=True)
class ReferenceCache:
    layers: tuple[ReferenceLayerCache, ...]


def encode_reference(
    unet: DenoisingUNet, ref_image: torch.Tensor, cond_tokens: torch.Tensor
) -> ReferenceCache:
    """Run a clean reference frame through ``unet`` at t=0 and cache the
    self-attention hidden states with their key/value projections.

    Gradients flow through the cache iff ``unet`` has trainable parameters,
    which is what refnet-style training needs; for the frozen backbone no
    graph is built.
    """
    global _encode_calls
    if ref_image.ndim == 3:
        ref_image = ref_image.unsqueeze(0)
    if ref_image.ndim != 4 or ref_image.shape[0] != 1:
        raise ShapeError(f"reference image must be [C, H, W] or [1, C, H, W], got {tuple(ref_image.shape)}")
    hidden: list[torch.Tensor] = []
    unet.forward(ref_image, 0, cond_tokens, capture_hidden=hidden)
    _encode_calls += 1
    layers = []
    for site, block in enumerate(unet.transformer_blocks):
        z_r = hidden[site][0]  # drop the singleton frame axis
        layers.append(
            ReferenceLayerCache(z_r=z_r, k_r=block.attn1.to_k(z_r), v_r=block.attn1.to_v(z_r))
        )
    return ReferenceCache(layers=tuple(layers))


class DynamicsAdapter(nn.Module):
    """Per-site trainable query copies and zero-initialized output projections."""

    def __init__(self, unet: DenoisingUNet):
        super().__init__()
        self.layers = nn.ModuleList(
            DynamicsAdapterLayer(block.attn1) for block in unet.transformer_blocks
        )

    @torch.no_grad()
    def reset_from(self, unet: DenoisingUNet) -> None:
        for layer, block in zip(self.layers, unet.transformer_blocks):
            layer.reset_from(block.attn1)


def init_dynamics_adapter(unet: DenoisingUNet) -> DynamicsAdapter:
    """Fresh adapter: W_Q' copied from the backbone, W'_O exactly zero."""
    return DynamicsAdapter(unet)


def init_refnet(backbone: DenoisingUNet) -> DenoisingUNet:
    """Trainable full copy of the backbone, initialized from its weights."""
    refnet = copy.deepcopy(backbone)
    for p in refnet.parameters():
        p.requires_grad_(True)
    return refnet


class IPAdapterModule(nn.Module):
    """Pooled-patch image embedding projected to conditioning tokens, plus
    per-site key/value projectors for those tokens."""

    def __init__(self, unet: DenoisingUNet, num_tokens: int, scale: float, patch: int = 8):
        super().__init__()
        cfg = unet.cfg
        self.num_tokens = num_tokens
        self.scale = scale
        self.patch = min(patch, cfg.image_size)
        self.cond_dim = cfg.attention_channels
        patch_dim = cfg.in_channels * self.patch * self.patch
        self.projector = nn.Linear(patch_dim, num_tokens * self.cond_dim)
        self.token_norm = nn.LayerNorm(self.cond_dim)
        self.layers = nn.ModuleList(
            IPAdapterLayer(block.attn2) for block in unet.transformer_blocks
        )

    def encode(self, ref_image: torch.Tensor) -> torch.Tensor:
        """Mean-pooled patch encoding -> [num_tokens, cond_dim] tokens."""
        if ref_image.ndim == 4:
            ref_image = ref_image[0]
        c, h, w = ref_image.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"image size {h}x{w} not divisible by patch size {p}")
        patches = ref_image.reshape(c, h // p, p, w // p, p).permute(1, 3, 0, 2, 4)
        pooled = patches.reshape(-1, c * p * p).mean(dim=0)
        tokens = self.projector(pooled).reshape(self.num_tokens, self.cond_dim)
        return self.token_norm(tokens)
