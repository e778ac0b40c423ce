"""Seed fan-out and deterministic execution switches."""

import hashlib
import random

import numpy as np
import torch


def derive_seed(seed: int, stage: str) -> int:
    """Stable 32-bit seed for ``stage``, independent of Python's hash randomization."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def set_determinism(enabled: bool = True):
    """Force single-threaded, deterministic torch kernels."""
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)
