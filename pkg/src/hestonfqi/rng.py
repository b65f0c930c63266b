"""Seeding helpers.

All normal draws come from numpy's ``PCG64`` bit generator fed through
``Generator.standard_normal`` (ziggurat over the raw 64-bit stream), so a
given integer seed yields the same path on every platform for a fixed numpy
major version.  Child seeds are derived by hashing, which keeps every
stream independent of how many siblings were requested.
"""
from __future__ import annotations

import hashlib

import numpy as np

SEED_BITS = 63


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(master: int, tag: str, index: int = 0) -> int:
    """Child seed for ``(master, tag, index)``.

    The first 8 bytes of ``blake2b(f"{master}:{tag}:{index}")`` read as a
    big-endian integer and masked to 63 bits.
    """
    digest = hashlib.blake2b(f"{int(master)}:{tag}:{int(index)}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "big") & ((1 << SEED_BITS) - 1)
