import pytest
import torch

from xdyna.config import ArchConfig
from xdyna.controlnet import ControlMap, ControlNet
from xdyna.errors import ParameterError, ShapeError
from xdyna.unet import reset_module_parameters
from xdyna.determinism import torch_generator


@pytest.fixture(scope="module")
def arch():
    return ArchConfig(image_size=8, frames=2)


@pytest.fixture(scope="module")
def branch(arch):
    net = ControlNet(arch).to(torch.float64)
    reset_module_parameters(net, torch_generator(0, "ctrl"))
    net.apply_zero_init()
    return net.requires_grad_(False)


def rand_map(arch, seed=0):
    gen = torch.Generator().manual_seed(seed)
    raster = torch.rand(arch.frames, 3, arch.image_size, arch.image_size,
                        generator=gen, dtype=torch.float64)
    return ControlMap(raster, "pose")


def rand_x(arch, seed=1):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(arch.frames, 3, arch.image_size, arch.image_size,
                       generator=gen, dtype=torch.float64)


def test_zero_init_residuals_are_exactly_zero(branch, arch):
    residuals = branch(rand_map(arch), rand_x(arch), 13)
    assert len(residuals) == 3
    for r in residuals:
        assert float(r.abs().max()) == 0.0


def test_residual_shapes_match_blocks(branch, arch):
    r0, r1, r2 = branch(rand_map(arch), rand_x(arch), 0)
    s = arch.image_size
    assert r0.shape == (arch.frames, arch.base_channels, s, s)
    assert r1.shape == (arch.frames, arch.attention_channels, s // 2, s // 2)
    assert r2.shape == (arch.frames, arch.attention_channels, s // 2, s // 2)


def test_blank_map_after_training_is_finite(branch, arch):
    # simulate trained heads: nonzero output projections must not break blanks
    trained = ControlNet(arch).to(torch.float64)
    reset_module_parameters(trained, torch_generator(2, "ctrl-trained"))
    blank = ControlMap.blank_map("pose", arch.frames, arch.image_size, arch.image_size)
    for r in trained(blank, rand_x(arch), 5):
        assert bool(torch.isfinite(r).all())


def test_determinism(branch, arch):
    a = branch(rand_map(arch, 5), rand_x(arch, 6), 9)
    b = branch(rand_map(arch, 5), rand_x(arch, 6), 9)
    for ra, rb in zip(a, b):
        assert torch.equal(ra, rb)


def test_spatial_mismatch_rejected(branch, arch):
    raster = torch.zeros(arch.frames, 3, 16, 16, dtype=torch.float64)
    with pytest.raises(ShapeError):
        branch(ControlMap(raster, "pose"), rand_x(arch), 0)


def test_blank_flag_consistency():
    with pytest.raises(ParameterError):
        ControlMap(torch.ones(1, 3, 4, 4), "pose", blank=True)
    blank = ControlMap.blank_map("face", 2, 4, 4)
    assert blank.blank and float(blank.raster.abs().max()) == 0.0


def test_bad_kind_rejected():
    with pytest.raises(ParameterError):
        ControlMap(torch.zeros(1, 3, 4, 4), "depth")
