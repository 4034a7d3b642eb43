"""Deterministic named sub-streams derived from a single master seed.

Every source of randomness in a run (data shuffling, parameter init, weight
sampling, synthetic generation) draws from its own named stream so that, for
example, ablation variants trained under the same master seed share identical
parameter initialization regardless of how much randomness the data pipeline
consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

ENV_SEED_VAR = "BAYESMTR_SEED"

# Canonical stream names used across the package.
STREAM_DATA = "data"
STREAM_INIT = "init"
STREAM_SAMPLING = "sampling"
STREAM_GENERATOR = "generator"


def substream_seed(master_seed: int, name: str) -> int:
    """Derive a stable 63-bit seed for the named stream.

    Uses SHA-256 over (master_seed, name) so streams are independent of each
    other and of the order in which they are created.
    """
    digest = hashlib.sha256(f"{master_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def np_generator(master_seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(substream_seed(master_seed, name)))


def torch_generator(master_seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(master_seed, name))
    return gen
