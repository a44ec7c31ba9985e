"""Self-describing checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON
header (sorted keys), then the raw little-endian bytes of every tensor in
header order.  The header records the architecture and schedule configs,
the training stage, the run seed, per-group frozen flags and content
hashes, and the tensor index.  Writing the same model twice produces
byte-identical files, and a save/load/save round trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ArchConfig, ScheduleConfig, config_from_dict, config_to_dict
from .errors import ConfigurationError
from .model import AnimationModel

MAGIC = b"XDYNCKPT"
FORMAT_VERSION = 1

_NP_DTYPES = {"float64": np.float64, "float32": np.float32, "int64": np.int64}


@dataclass
class CheckpointInfo:
    arch: ArchConfig
    schedule: ScheduleConfig
    stage: int
    seed: int
    frozen: dict[str, bool]
    group_hashes: dict[str, str]
    extra: dict


def save_checkpoint(
    model: AnimationModel,
    schedule: ScheduleConfig,
    stage: int,
    seed: int,
    path: str | Path,
    *,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    names = sorted(state.keys())
    tensors = []
    offset = 0
    blobs = []
    for name in names:
        tensor = state[name].detach().contiguous()
        array = tensor.numpy()
        blob = array.tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": str(array.dtype),
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    frozen = {
        group: not any(p.requires_grad for _, p in model.group_parameters(group))
        for group in model.group_names()
    }
    header = {
        "format_version": FORMAT_VERSION,
        "arch": config_to_dict(model.cfg),
        "schedule": config_to_dict(schedule),
        "stage": stage,
        "seed": seed,
        "frozen": frozen,
        "group_hashes": model.group_hashes(),
        "tensors": tensors,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


def _read_raw(path: str | Path) -> tuple[dict, int, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ConfigurationError(f"{path} is not a checkpoint file (bad magic)")
    header_len = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + header_len])
    return header, 16 + header_len, raw


def read_header(path: str | Path) -> dict:
    return _read_raw(path)[0]


def load_checkpoint(path: str | Path) -> tuple[AnimationModel, CheckpointInfo]:
    """Rebuild the model and verify per-group content hashes."""
    path = Path(path)
    header, data_start, raw = _read_raw(path)
    if header["format_version"] != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {header['format_version']}")
    arch = config_from_dict(ArchConfig, header["arch"])
    schedule = config_from_dict(ScheduleConfig, header["schedule"])
    model = AnimationModel(arch)
    state = {}
    for entry in header["tensors"]:
        dtype = _NP_DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ConfigurationError(f"unsupported tensor dtype {entry['dtype']!r}")
        start = data_start + entry["offset"]
        array = np.frombuffer(raw[start : start + entry["nbytes"]], dtype=dtype).reshape(
            entry["shape"]
        )
        state[entry["name"]] = torch.from_numpy(array.copy())
    model.load_state_dict(state, strict=True)
    model.requires_grad_(False)

    hashes = model.group_hashes()
    if hashes != header["group_hashes"]:
        raise ConfigurationError(f"checkpoint {path} failed content-hash verification")
    info = CheckpointInfo(
        arch=arch,
        schedule=schedule,
        stage=header["stage"],
        seed=header["seed"],
        frozen=header["frozen"],
        group_hashes=header["group_hashes"],
        extra=header["extra"],
    )
    return model, info
