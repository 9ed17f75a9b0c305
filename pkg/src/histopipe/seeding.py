"""Stable seed derivation for reproducible, order-independent randomness.

Every random draw in the pipeline is keyed on a tuple of identifiers
(master seed, image id, augmentation index, ...) hashed into a 64-bit
seed. Python's builtin ``hash`` is salted per process, so keys go through
blake2b instead; streams are therefore identical across runs, platforms
and worker counts.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Map an arbitrary key tuple to a stable 64-bit seed."""
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def keyed_rng(*parts) -> np.random.Generator:
    """A PCG64 generator seeded from :func:`derive_seed` of the key tuple."""
    return np.random.default_rng(derive_seed(*parts))
