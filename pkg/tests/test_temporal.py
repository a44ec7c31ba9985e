import math

import numpy as np
import pytest
import torch

from xdyna.errors import ConfigurationError
from xdyna.temporal import TemporalAttention, sinusoidal_table, temporal_attention


def make_params(d_model=6, max_frames=8, seed=0, zero=False):
    gen = torch.Generator().manual_seed(seed)
    params = TemporalAttention(d_model, max_frames).to(torch.float64)
    for p in params.parameters():
        p.data.normal_(0.0, 0.4, generator=gen)
    if zero:
        params.zero_output_projection()
    return params.requires_grad_(False)


def test_zero_init_is_identity():
    params = make_params(zero=True)
    z = torch.randn(5, 7, 6, dtype=torch.float64)
    assert torch.equal(temporal_attention(params, z), z)


def test_single_frame_zero_init_identity():
    params = make_params(zero=True)
    z = torch.randn(1, 4, 6, dtype=torch.float64)
    assert torch.equal(temporal_attention(params, z), z)


def test_two_frame_scalar_oracle():
    # d_model = 1, two frames, one token: explicit 2-key softmax
    params = TemporalAttention(1, 4).to(torch.float64)
    for linear, w in (
        (params.to_q, 0.7), (params.to_k, -1.1), (params.to_v, 0.9), (params.to_out, 1.3),
    ):
        linear.weight.data = torch.tensor([[w]], dtype=torch.float64)
    params.requires_grad_(False)
    z = torch.tensor([[[0.4]], [[-0.6]]], dtype=torch.float64)  # [F=2, tokens=1, d=1]
    pos = params.position_table[:2, 0]
    seq = [float(z[0]) + float(pos[0]), float(z[1]) + float(pos[1])]

    out = temporal_attention(params, z)
    for i in range(2):
        q = 0.7 * seq[i]
        scores = [q * (-1.1) * seq[0], q * (-1.1) * seq[1]]  # d = 1, scale 1/sqrt(1)
        e = [math.exp(s - max(scores)) for s in scores]
        w0, w1 = e[0] / sum(e), e[1] / sum(e)
        attn = w0 * 0.9 * seq[0] + w1 * 0.9 * seq[1]
        expected = float(z[i]) + 1.3 * attn
        assert abs(float(out[i, 0, 0]) - expected) < 1e-10


def test_permutation_covariance():
    params = make_params(d_model=6, max_frames=8, seed=4)
    frames = 5
    z = torch.randn(frames, 3, 6, dtype=torch.float64)
    perm = torch.tensor([3, 0, 4, 1, 2])

    permuted = TemporalAttention(6, 8).to(torch.float64)
    permuted.load_state_dict(params.state_dict())
    table = params.position_table.clone()
    table[:frames] = table[:frames][perm]
    permuted.position_table.copy_(table)
    permuted.requires_grad_(False)

    out = temporal_attention(params, z)
    out_perm = temporal_attention(permuted, z[perm])
    assert float((out_perm - out[perm]).abs().max()) < 1e-10


def test_frame_count_exceeding_table():
    params = make_params(max_frames=4)
    with pytest.raises(ConfigurationError):
        temporal_attention(params, torch.randn(5, 2, 6, dtype=torch.float64))


def test_sinusoidal_table_shape_and_range():
    table = sinusoidal_table(16, 6)
    assert table.shape == (16, 6)
    assert float(table.abs().max()) <= 1.0
    assert not torch.equal(table[0], table[1])


def test_position_table_length_invariant():
    params = make_params(max_frames=8)
    assert params.position_table.shape[0] >= 8
