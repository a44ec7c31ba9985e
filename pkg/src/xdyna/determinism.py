"""Seed derivation and the deterministic reference mode.

All stochastic code in the package draws from generators seeded through
:func:`child_seed`, which hashes a master seed together with a tuple of
string/int tags.  Re-running any entry point with the same seed therefore
reproduces every random draw, independent of call order or process
boundaries.

Deterministic reference mode (``XDYNA_DETERMINISTIC=1`` or an explicit
:func:`enable_deterministic_mode` call) pins torch to a single thread so
that reduction order is fixed.  Test runs and training runs that must be
byte-reproducible use this mode; exploratory runs may leave it off.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np
import torch

ENV_FLAG = "XDYNA_DETERMINISTIC"


def child_seed(seed: int, *tags: object) -> int:
    """Derive a stable 63-bit seed from a master seed and a tag path."""
    key = repr((int(seed),) + tuple(tags)).encode()
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(seed: int, *tags: object) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(child_seed(seed, *tags))
    return gen


def numpy_rng(seed: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, *tags))


def deterministic_mode_requested() -> bool:
    return os.environ.get(ENV_FLAG, "") == "1"


def enable_deterministic_mode() -> None:
    """Single-threaded torch execution with a fixed reduction order."""
    torch.set_num_threads(1)


def apply_determinism_from_env() -> bool:
    """Enable deterministic mode if the environment flag is set."""
    if deterministic_mode_requested():
        enable_deterministic_mode()
        return True
    return False
