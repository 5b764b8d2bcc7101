"""
Seed derivation and random generator factories.

Every stochastic component receives an explicit generator derived from a
tuple of keys, so results never depend on global RNG state or worker count.
"""

import hashlib
from typing import Union

import numpy as np
import torch

SeedKey = Union[int, str]


def derive_seed(*keys: SeedKey) -> int:
    """Hash an ordered key tuple into a 63-bit seed."""
    text = "/".join(str(key) for key in keys)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def numpy_generator(*keys: SeedKey) -> np.random.Generator:
    """numpy generator for data and augmentation streams."""
    return np.random.default_rng(derive_seed(*keys))


def torch_generator(*keys: SeedKey) -> torch.Generator:
    """CPU torch generator for weight initialization streams."""
    generator = torch.Generator()
    generator.manual_seed(derive_seed(*keys))
    return generator


def set_determinism(enabled: bool) -> None:
    """Toggle deterministic torch kernels for bit-reproducible runs."""
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = not enabled
        torch.backends.cudnn.deterministic = enabled
