import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from xdyna.errors import ParameterError, ShapeError
from xdyna.schedules import add_noise, make_noise_schedule


def test_single_step_schedule():
    s = make_noise_schedule(1, 0.1, 0.1)
    assert torch.allclose(s.betas, torch.tensor([0.1], dtype=torch.float64))
    assert torch.allclose(s.alpha_bars, torch.tensor([0.9], dtype=torch.float64))


def test_two_step_schedule():
    s = make_noise_schedule(2, 0.1, 0.3)
    assert torch.allclose(s.alpha_bars, torch.tensor([0.9, 0.63], dtype=torch.float64))


def test_cumulative_product_oracle():
    # independent brute-force cumulative product
    s = make_noise_schedule(100, 1e-4, 0.02)
    betas = np.linspace(1e-4, 0.02, 100)
    acc = 1.0
    for b in betas:
        acc *= 1.0 - b
    assert abs(float(s.alpha_bars[99]) - acc) < 1e-15
    assert abs(float(s.betas[0]) - 1e-4) < 1e-18
    assert abs(float(s.betas[99]) - 0.02) < 1e-18


def test_alpha_bars_strictly_decreasing():
    s = make_noise_schedule(250, 1e-4, 0.05)
    diffs = s.alpha_bars[1:] - s.alpha_bars[:-1]
    assert bool((diffs < 0).all())


@pytest.mark.parametrize(
    "args",
    [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0), (10, -0.1, 0.2)],
)
def test_invalid_schedule_parameters(args):
    with pytest.raises(ParameterError):
        make_noise_schedule(*args)


def test_add_noise_zero_noise():
    s = make_noise_schedule(10, 1e-4, 0.02)
    x0 = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    out = add_noise(x0, torch.zeros_like(x0), 4, s)
    assert torch.equal(out, torch.sqrt(s.alpha_bars[4]) * x0)


def test_add_noise_zero_signal():
    s = make_noise_schedule(10, 1e-4, 0.02)
    eps = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    out = add_noise(torch.zeros_like(eps), eps, 7, s)
    assert torch.equal(out, torch.sqrt(1.0 - s.alpha_bars[7]) * eps)


def test_add_noise_scalar_oracle():
    s = make_noise_schedule(10, 1e-4, 0.02)
    gen = torch.Generator().manual_seed(5)
    x0 = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    t = 6
    out = add_noise(x0, eps, t, s)
    a = float(s.alpha_bars[t])
    import math

    for idx in np.ndindex(2, 3, 4, 4):
        expected = math.sqrt(a) * float(x0[idx]) + math.sqrt(1.0 - a) * float(eps[idx])
        assert abs(float(out[idx]) - expected) < 1e-12


def test_add_noise_shape_mismatch():
    s = make_noise_schedule(10, 1e-4, 0.02)
    with pytest.raises(ShapeError):
        add_noise(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), 0, s)


def test_add_noise_t_out_of_range():
    s = make_noise_schedule(10, 1e-4, 0.02)
    x = torch.zeros(1, 3, 4, 4)
    with pytest.raises(ParameterError):
        add_noise(x, x, 10, s)


@settings(max_examples=25, deadline=None)
@given(
    t=st.integers(min_value=0, max_value=49),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_noising_inversion_property(t, seed):
    # knowing the true noise, the corruption inverts exactly
    s = make_noise_schedule(50, 1e-4, 0.02)
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    x_t = add_noise(x0, eps, t, s)
    a = s.alpha_bars[t]
    recovered = (x_t - torch.sqrt(1.0 - a) * eps) / torch.sqrt(a)
    assert float((recovered - x0).abs().max()) < 1e-10
