"""Stable seed derivation so every stage draws from an explicit seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Hash heterogeneous parts into a 63-bit seed, stable across runs."""
    digest = hashlib.blake2b(
        "\x1f".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
