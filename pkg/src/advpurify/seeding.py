"""Seed derivation helpers.

Every stochastic consumer gets its own stream derived by hashing the master
seed together with a component name (and optionally a batch index), so two
components never share a stream by accident.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(master_seed: int, *keys: object) -> int:
    """Return a 63-bit child seed for ``(master_seed, *keys)``."""
    payload = repr((int(master_seed),) + tuple(str(k) for k in keys)).encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
