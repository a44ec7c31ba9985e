import pytest
import torch

from xdyna.attention import AttentionLayer
from xdyna.config import ArchConfig
from xdyna.errors import ShapeError
from xdyna.model import build_model
from xdyna.reference import encode_call_count, encode_reference, init_dynamics_adapter, init_refnet
from xdyna.unet import DenoisingUNet


def ref_image(arch, seed=0):
    gen = torch.Generator().manual_seed(seed)
    img = torch.rand(
        arch.in_channels, arch.image_size, arch.image_size, generator=gen, dtype=arch.torch_dtype
    )
    return img * 2.0 - 1.0


def test_encode_reference_deterministic(tiny_model, tiny_arch):
    img = ref_image(tiny_arch)
    c1 = encode_reference(tiny_model.unet, img, tiny_model.null_token)
    c2 = encode_reference(tiny_model.unet, img, tiny_model.null_token)
    assert len(c1.layers) == tiny_model.unet.num_attention_sites
    for a, b in zip(c1.layers, c2.layers):
        assert torch.equal(a.z_r, b.z_r)
        assert torch.equal(a.k_r, b.k_r)
        assert torch.equal(a.v_r, b.v_r)


def test_cache_keys_are_definitional(tiny_model, tiny_arch):
    cache = encode_reference(tiny_model.unet, ref_image(tiny_arch, 1), tiny_model.null_token)
    for site, layer_cache in enumerate(cache.layers):
        block = tiny_model.unet.transformer_blocks[site]
        assert float((layer_cache.k_r - block.attn1.to_k(layer_cache.z_r)).abs().max()) < 1e-12
        assert float((layer_cache.v_r - block.attn1.to_v(layer_cache.z_r)).abs().max()) < 1e-12


def test_encode_counts_calls(tiny_model, tiny_arch):
    before = encode_call_count()
    encode_reference(tiny_model.unet, ref_image(tiny_arch, 2), tiny_model.null_token)
    assert encode_call_count() == before + 1


def test_encode_rejects_bad_shape(tiny_model, tiny_arch):
    with pytest.raises(ShapeError):
        encode_reference(
            tiny_model.unet,
            torch.zeros(2, 3, tiny_arch.image_size, tiny_arch.image_size, dtype=torch.float64),
            tiny_model.null_token,
        )


def test_single_token_hand_computed_cache():
    # 1-token toy: a single AttentionLayer consuming a 1x1 hidden state
    layer = AttentionLayer(2).to(torch.float64)
    layer.to_k.weight.data = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    layer.to_v.weight.data = torch.tensor([[0.5, -1.0], [2.0, 0.0]], dtype=torch.float64)
    z_r = torch.tensor([[1.0, -2.0]], dtype=torch.float64)
    k = layer.to_k(z_r)
    v = layer.to_v(z_r)
    assert torch.allclose(k, torch.tensor([[1.0 - 4.0, 3.0 - 8.0]], dtype=torch.float64))
    assert torch.allclose(v, torch.tensor([[0.5 + 2.0, 2.0]], dtype=torch.float64))


def test_init_dynamics_adapter_contract(tiny_model):
    adapter = init_dynamics_adapter(tiny_model.unet)
    for site, block in enumerate(tiny_model.unet.transformer_blocks):
        assert torch.equal(adapter.layers[site].to_q_prime.weight, block.attn1.to_q.weight)
        assert float(adapter.layers[site].to_out_prime.weight.abs().max()) == 0.0


def test_init_refnet_is_trainable_copy(tiny_model):
    refnet = init_refnet(tiny_model.unet)
    assert isinstance(refnet, DenoisingUNet)
    for (na, pa), (nb, pb) in zip(
        sorted(refnet.named_parameters()), sorted(tiny_model.unet.named_parameters())
    ):
        assert na == nb
        assert torch.equal(pa, pb)
        assert pa.requires_grad
    # independent copies: mutating the refnet leaves the backbone alone
    next(refnet.parameters()).data += 1.0
    changed = any(
        not torch.equal(pa, pb)
        for (_, pa), (_, pb) in zip(
            sorted(refnet.named_parameters()), sorted(tiny_model.unet.named_parameters())
        )
    )
    assert changed


def test_refnet_mode_uses_copy_for_encoding():
    arch = ArchConfig(image_size=8, frames=2, adapter_mode="refnet_concat")
    model = build_model(arch, seed=3)
    img = ref_image(arch, 4)
    cache = model.encode_appearance(img)
    direct = encode_reference(model.refnet, img, model.null_token)
    for a, b in zip(cache.layers, direct.layers):
        assert torch.equal(a.z_r, b.z_r)
    # perturbing the copy changes the cache; the frozen backbone does not see it
    with torch.no_grad():
        model.refnet.conv_in.weight += 0.5
    cache2 = model.encode_appearance(img)
    assert not torch.equal(cache2.layers[0].z_r, cache.layers[0].z_r)


def test_ip_adapter_token_shapes():
    arch = ArchConfig(image_size=8, frames=2, adapter_mode="ip_adapter")
    model = build_model(arch, seed=5)
    tokens = model.encode_appearance(ref_image(arch, 6))
    assert tokens.shape == (arch.ip_tokens, arch.attention_channels)
    tokens2 = model.encode_appearance(ref_image(arch, 6))
    assert torch.equal(tokens, tokens2)
