"""Attention primitives and the reference-appearance attention variants.

Three mechanisms consume reference-image context inside the backbone's
transformer blocks, all behind the same call shape:

* cross-frame adapter attention: the frame's self-attention output is
  augmented with a residual that attends from a trainable query copy to the
  reference keys/values, through a zero-initialized output projection
  (``A @ W_O + A' @ W'_O``);
* concatenated self-attention: keys and values are computed over the
  concatenation of frame and reference hidden states;
* decoupled cross-attention: reference tokens get their own key/value
  projectors next to the text tokens, mixed with a scale ``lambda``.

Hidden states are ``[..., tokens, d_model]``; leading dimensions are
batched (frames for spatial attention, pixel locations for temporal).
All projections are bias-free single-head linear maps.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ShapeError


class AttentionLayer(nn.Module):
    """Single-head attention projections W_Q, W_K, W_V and output W_O.

    ``kv_dim`` lets the key/value projections read from a different source
    width (cross-attention over conditioning tokens); it defaults to
    ``d_model`` for self-attention.
    """

    def __init__(self, d_model: int, d: int | None = None, kv_dim: int | None = None):
        super().__init__()
        d = d_model if d is None else d
        kv_dim = d_model if kv_dim is None else kv_dim
        self.d = d
        self.d_model = d_model
        self.kv_dim = kv_dim
        self.to_q = nn.Linear(d_model, d, bias=False)
        self.to_k = nn.Linear(kv_dim, d, bias=False)
        self.to_v = nn.Linear(kv_dim, d, bias=False)
        self.to_out = nn.Linear(d, d_model, bias=False)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic attention matrix softmax(q k^T / sqrt(d))."""
    d = q.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(d)
    return torch.softmax(scores, dim=-1)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return attention_weights(q, k) @ v


def self_attention(layer: AttentionLayer, z: torch.Tensor) -> torch.Tensor:
    """Plain self-attention output ``A @ W_O`` (no input residual)."""
    a = attend(layer.to_q(z), layer.to_k(z), layer.to_v(z))
    return layer.to_out(a)


class DynamicsAdapterLayer(nn.Module):
    """Trainable query copy and zero-initialized output projection for one
    attention site.

    At construction ``to_q_prime`` equals the host layer's W_Q elementwise
    and ``to_out_prime`` is exactly zero, so the residual starts inert.
    """

    def __init__(self, layer: AttentionLayer):
        super().__init__()
        self.to_q_prime = nn.Linear(layer.d_model, layer.d, bias=False)
        self.to_out_prime = nn.Linear(layer.d, layer.d_model, bias=False)
        self.to(layer.to_q.weight.dtype)
        self.reset_from(layer)

    @torch.no_grad()
    def reset_from(self, layer: AttentionLayer) -> None:
        self.to_q_prime.weight.copy_(layer.to_q.weight)
        self.to_out_prime.weight.zero_()


def dynamics_adapter_attention(
    layer: AttentionLayer,
    adapter: DynamicsAdapterLayer,
    z: torch.Tensor,
    k_ref: torch.Tensor,
    v_ref: torch.Tensor,
) -> torch.Tensor:
    """Self-attention plus the cross-frame reference residual.

    Returns ``A @ W_O + A' @ W'_O`` where ``A`` attends within the frame
    and ``A'`` attends from the adapter's query copy to the reference
    keys/values shared by all frames.
    """
    if k_ref.shape[-1] != layer.d or v_ref.shape[-1] != layer.d:
        raise ShapeError(
            f"reference key/value width {k_ref.shape[-1]}/{v_ref.shape[-1]} "
            f"does not match attention dim {layer.d}"
        )
    base = attend(layer.to_q(z), layer.to_k(z), layer.to_v(z))
    ref = attend(adapter.to_q_prime(z), k_ref, v_ref)
    return layer.to_out(base) + adapter.to_out_prime(ref)


def refnet_concat_attention(
    layer: AttentionLayer, z: torch.Tensor, z_ref: torch.Tensor
) -> torch.Tensor:
    """Self-attention over keys/values from the concatenation [z, z_ref].

    Queries come from ``z`` only, so the output token count equals the input
    token count.  ``z_ref`` may have zero tokens, which degenerates to plain
    self-attention.
    """
    if z_ref.shape[-1] != z.shape[-1]:
        raise ShapeError(
            f"reference feature width {z_ref.shape[-1]} != frame feature width {z.shape[-1]}"
        )
    if z_ref.ndim == z.ndim - 1:
        z_ref = z_ref.expand(*z.shape[:-2], *z_ref.shape)
    zcat = torch.cat([z, z_ref], dim=-2)
    a = attend(layer.to_q(z), layer.to_k(zcat), layer.to_v(zcat))
    return layer.to_out(a)


def cross_attention(layer: AttentionLayer, z: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Cross-attention from frame hidden states to conditioning tokens."""
    if tokens.shape[-1] != layer.kv_dim:
        raise ShapeError(
            f"conditioning token width {tokens.shape[-1]} != layer kv width {layer.kv_dim}"
        )
    a = attend(layer.to_q(z), layer.to_k(tokens), layer.to_v(tokens))
    return layer.to_out(a)


class IPAdapterLayer(nn.Module):
    """Extra key/value projectors for reference tokens at one cross-attention
    site, initialized as copies of the host projections."""

    def __init__(self, layer: AttentionLayer):
        super().__init__()
        self.to_k_ip = nn.Linear(layer.kv_dim, layer.d, bias=False)
        self.to_v_ip = nn.Linear(layer.kv_dim, layer.d, bias=False)
        self.to(layer.to_k.weight.dtype)
        self.reset_from(layer)

    @torch.no_grad()
    def reset_from(self, layer: AttentionLayer) -> None:
        self.to_k_ip.weight.copy_(layer.to_k.weight)
        self.to_v_ip.weight.copy_(layer.to_v.weight)


def ip_adapter_attention(
    layer: AttentionLayer,
    ip: IPAdapterLayer,
    z: torch.Tensor,
    text_tokens: torch.Tensor,
    ref_tokens: torch.Tensor,
    scale: float,
) -> torch.Tensor:
    """Decoupled cross-attention ``(A' + lambda * A'') @ W_O``.

    The query is shared between the text branch and the reference branch;
    at ``scale == 0`` the output equals plain text cross-attention.
    """
    if text_tokens.shape[-2] == 0:
        raise ShapeError("text_tokens must contain at least one token")
    if ref_tokens.shape[-1] != layer.kv_dim:
        raise ShapeError(
            f"reference token width {ref_tokens.shape[-1]} != layer kv width {layer.kv_dim}"
        )
    q = layer.to_q(z)
    a_text = attend(q, layer.to_k(text_tokens), layer.to_v(text_tokens))
    a_ref = attend(q, ip.to_k_ip(ref_tokens), ip.to_v_ip(ref_tokens))
    return layer.to_out(a_text + scale * a_ref)
