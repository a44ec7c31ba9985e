"""Configuration records for the model, the noise schedule, and training.

Configs are plain dataclasses with strict dict (de)serialization: unknown
keys are rejected so that a typo in a config file or a ``--set`` override
fails loudly instead of being silently ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

import torch

from .errors import ConfigurationError, ParameterError

ADAPTER_MODES = ("none", "dynamics_adapter", "refnet_concat", "ip_adapter")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ArchConfig:
    """Backbone and attachment-module hyperparameters."""

    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2)
    temb_dim: int = 128
    norm_groups: int = 8
    frames: int = 8
    max_frames: int = 32
    control_width_divisor: int = 2
    ip_tokens: int = 4
    ip_scale: float = 1.0
    adapter_mode: str = "dynamics_adapter"
    dtype: str = "float64"

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        if self.adapter_mode not in ADAPTER_MODES:
            raise ConfigurationError(
                f"adapter_mode must be one of {ADAPTER_MODES}, got {self.adapter_mode!r}"
            )
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.image_size % (2 ** (len(self.channel_mult) - 1)) != 0:
            raise ConfigurationError("image_size must be divisible by the downsampling factor")
        if self.frames < 1 or self.frames > self.max_frames:
            raise ConfigurationError("frames must satisfy 1 <= frames <= max_frames")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @property
    def attention_channels(self) -> int:
        """Channel width at the attention resolution (also the token width)."""
        return self.base_channels * self.channel_mult[-1]


@dataclass
class ScheduleConfig:
    """Linear-beta noising schedule parameters.

    The default endpoint is chosen so the 100-step chain actually reaches
    the Gaussian prior (alpha_bar[T-1] ~ 5e-3); the classic 1000-step
    endpoint of 0.02 would leave 60% of the signal at T-1 and starve the
    sampler, which starts from pure noise.
    """

    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.12


@dataclass
class TrainConfig:
    """One training stage: data, optimizer, and trainable-group flags.

    ``epochs`` counts shuffled passes over the manifest; ``max_steps``, when
    set, truncates the run (and is what the small acceptance runs use).
    ``trainable_groups`` defaults per stage; overriding it is allowed but
    stage contracts (frozen backbone, stage-2 face-only) are still enforced.
    """

    stage: int = 1
    manifest: str = ""
    out_dir: str = ""
    learning_rate: float = 1e-5
    batch_size: int = 1
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    ref_frame_policy: str = "random"  # "random" | "first"
    trainable_groups: tuple[str, ...] | None = None
    arch: ArchConfig = field(default_factory=ArchConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError("stage must be 1 or 2")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be > 0")
        if self.batch_size != 1:
            raise ConfigurationError("only batch_size=1 (one clip per step) is supported")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.ref_frame_policy not in ("random", "first"):
            raise ConfigurationError("ref_frame_policy must be 'random' or 'first'")
        if self.trainable_groups is not None:
            self.trainable_groups = tuple(self.trainable_groups)


def config_to_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)

    def _tuples_to_lists(obj):
        if isinstance(obj, dict):
            return {k: _tuples_to_lists(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return [_tuples_to_lists(v) for v in obj]
        return obj

    return _tuples_to_lists(out)


def config_from_dict(cls, data: dict):
    """Build a config dataclass, rejecting unknown keys and recursing into
    nested config fields."""
    if not isinstance(data, dict):
        raise ParameterError(f"{cls.__name__} config must be a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ParameterError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        ftype = fields[name].type
        if name == "arch":
            value = value if isinstance(value, ArchConfig) else config_from_dict(ArchConfig, value)
        elif name == "schedule":
            value = (
                value if isinstance(value, ScheduleConfig) else config_from_dict(ScheduleConfig, value)
            )
        elif isinstance(value, list) and "tuple" in str(ftype):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` overrides onto a nested config dict.

    Values are parsed as JSON when possible, else taken as strings.  The
    key path must already exist in the dict (unknown keys are rejected).
    """
    for item in overrides:
        if "=" not in item:
            raise ParameterError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = data
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ParameterError(f"unknown config key {path!r}")
            node = node[key]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ParameterError(f"unknown config key {path!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[leaf] = value
    return data
