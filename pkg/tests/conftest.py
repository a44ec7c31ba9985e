import pytest
import torch

from xdyna.config import ArchConfig
from xdyna.determinism import enable_deterministic_mode
from xdyna.model import build_model

enable_deterministic_mode()


@pytest.fixture(scope="session")
def tiny_arch() -> ArchConfig:
    """Small double-precision instance: 2 frames at 8x8."""
    return ArchConfig(image_size=8, frames=2)


@pytest.fixture(scope="session")
def tiny_model(tiny_arch):
    return build_model(tiny_arch, seed=11)


@pytest.fixture()
def rng():
    gen = torch.Generator()
    gen.manual_seed(1234)
    return gen
