"""Full pipeline assembly: frozen backbone plus all attachments.

The model owns named parameter groups so that training stages, freeze
discipline, checkpointing, and gradient verification all speak the same
vocabulary:

* ``backbone``      — the denoising UNet (frozen in every stage)
* ``text_cond``     — the learned null conditioning token
* ``adapter`` / ``refnet`` / ``ip_adapter`` — the appearance mechanism
  selected by ``arch.adapter_mode`` (only that one is instantiated)
* ``control_pose`` / ``control_face`` — the two conditioning branches
* ``temporal``      — frame-axis attention layers

``init_parameters`` performs the full deterministic initialization,
including the special resets (query-copy + zero output for the adapter,
zero heads for the control branches and temporal layers, backbone-copy for
the reference network) and leaves every parameter frozen; training code
enables exactly the groups a stage may touch.
"""

from __future__ import annotations

import hashlib

import torch
from torch import nn

from .config import ArchConfig
from .controlnet import ControlMap, ControlNet
from .errors import ConfigurationError
from .reference import (
    DynamicsAdapter,
    IPAdapterModule,
    ReferenceCache,
    encode_reference,
)
from .temporal import TemporalModule
from .unet import DenoisingUNet, reset_module_parameters
from .determinism import torch_generator


class AnimationModel(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.cfg = arch
        self.unet = DenoisingUNet(arch)
        self.null_token = nn.Parameter(torch.zeros(1, arch.attention_channels))
        self.control_pose = ControlNet(arch)
        self.control_face = ControlNet(arch)
        self.temporal = TemporalModule(arch.attention_channels, arch.max_frames)
        self.adapter = None
        self.refnet = None
        self.ip_adapter = None
        if arch.adapter_mode == "dynamics_adapter":
            self.adapter = DynamicsAdapter(self.unet)
        elif arch.adapter_mode == "refnet_concat":
            self.refnet = DenoisingUNet(arch)
        elif arch.adapter_mode == "ip_adapter":
            self.ip_adapter = IPAdapterModule(self.unet, arch.ip_tokens, arch.ip_scale)
        self.to(arch.torch_dtype)

    # ----- initialization and parameter bookkeeping -------------------------

    @torch.no_grad()
    def init_parameters(self, seed: int) -> None:
        """Deterministic full initialization; leaves all groups frozen."""
        reset_module_parameters(self.unet, torch_generator(seed, "init", "backbone"))
        self.null_token.normal_(0.0, 1.0, generator=torch_generator(seed, "init", "text_cond"))
        for name in ("control_pose", "control_face", "temporal"):
            module = getattr(self, name)
            reset_module_parameters(module, torch_generator(seed, "init", name))
            module.apply_zero_init()
        if self.adapter is not None:
            self.adapter.reset_from(self.unet)
        if self.refnet is not None:
            self.refnet.load_state_dict(self.unet.state_dict())
        if self.ip_adapter is not None:
            reset_module_parameters(
                self.ip_adapter, torch_generator(seed, "init", "ip_adapter")
            )
            for layer, block in zip(self.ip_adapter.layers, self.unet.transformer_blocks):
                layer.reset_from(block.attn2)
        self.requires_grad_(False)

    @property
    def adapter_group(self) -> str:
        return {
            "none": "",
            "dynamics_adapter": "adapter",
            "refnet_concat": "refnet",
            "ip_adapter": "ip_adapter",
        }[self.cfg.adapter_mode]

    def group_names(self) -> list[str]:
        names = ["backbone", "text_cond", "control_pose", "control_face", "temporal"]
        if self.adapter_group:
            names.insert(2, self.adapter_group)
        return names

    def _group_prefix(self, group: str) -> str:
        if group == "backbone":
            return "unet."
        if group == "text_cond":
            return "null_token"
        return group + "."

    def group_parameters(self, group: str) -> list[tuple[str, nn.Parameter]]:
        if group not in self.group_names():
            raise ConfigurationError(f"unknown parameter group {group!r}")
        prefix = self._group_prefix(group)
        return sorted(
            (name, p) for name, p in self.named_parameters() if name.startswith(prefix)
        )

    def set_trainable(self, groups: tuple[str, ...] | list[str]) -> None:
        """Freeze everything, then enable gradients for the given groups."""
        unknown = set(groups) - set(self.group_names())
        if unknown:
            raise ConfigurationError(f"unknown trainable groups: {sorted(unknown)}")
        self.requires_grad_(False)
        for group in groups:
            for _, p in self.group_parameters(group):
                p.requires_grad_(True)

    def group_hash(self, group: str) -> str:
        """SHA-256 over the group's parameter names and raw little-endian bytes."""
        digest = hashlib.sha256()
        for name, p in self.group_parameters(group):
            digest.update(name.encode())
            digest.update(p.detach().numpy().tobytes())
        return digest.hexdigest()

    def group_hashes(self) -> dict[str, str]:
        return {g: self.group_hash(g) for g in self.group_names()}

    # ----- conditioning and prediction ---------------------------------------

    def cond_tokens(self) -> torch.Tensor:
        return self.null_token

    def encode_appearance(self, ref_image: torch.Tensor):
        """Encode the reference once; the result is reusable across frames
        and denoising steps.  Returns None / ReferenceCache / token tensor
        depending on the adapter mode."""
        mode = self.cfg.adapter_mode
        if mode == "none":
            return None
        if mode == "dynamics_adapter":
            return encode_reference(self.unet, ref_image, self.null_token)
        if mode == "refnet_concat":
            return encode_reference(self.refnet, ref_image, self.null_token)
        return self.ip_adapter.encode(ref_image)

    def control_residuals(
        self, x_t: torch.Tensor, t: int, pose_map: ControlMap | None, face_map: ControlMap | None
    ):
        residuals = None
        for branch, ctrl in ((self.control_pose, pose_map), (self.control_face, face_map)):
            if ctrl is None:
                continue
            out = branch(ctrl, x_t, t)
            residuals = out if residuals is None else tuple(a + b for a, b in zip(residuals, out))
        return residuals

    def forward(
        self,
        x_t: torch.Tensor,
        t: int,
        appearance=None,
        pose_map: ControlMap | None = None,
        face_map: ControlMap | None = None,
    ) -> torch.Tensor:
        """Predict epsilon for a noisy clip under the full conditioning."""
        mode = self.cfg.adapter_mode
        if mode != "none" and appearance is None:
            raise ConfigurationError(f"adapter_mode {mode!r} requires encoded appearance")
        reference = appearance if isinstance(appearance, ReferenceCache) else None
        ip_tokens = appearance if mode == "ip_adapter" else None
        return self.unet(
            x_t,
            t,
            self.null_token,
            adapter_mode=mode,
            reference=reference,
            dynamics_adapter=self.adapter,
            ip_adapter=self.ip_adapter,
            ip_tokens=ip_tokens,
            temporal=self.temporal,
            control_residuals=self.control_residuals(x_t, t, pose_map, face_map),
        )


def build_model(arch: ArchConfig, seed: int) -> AnimationModel:
    model = AnimationModel(arch)
    model.init_parameters(seed)
    return model
