"""Deterministic seed derivation and PRNG construction.

All randomness in the package flows through numpy's PCG64 generator, seeded
either directly or through :func:`derive_seed`. Derivation is SHA-256 based so
that per-system / per-pair seeds are independent of generation order and of
the platform's hash randomization.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

PRNG_NAME = "numpy-pcg64"


def derive_seed(*parts: int | str) -> int:
    """Mix integer/string parts into a stable seed in [0, 2**63)."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, str):
            h.update(b"s")
            h.update(part.encode("utf-8"))
        else:
            h.update(b"i")
            h.update(struct.pack("<q", int(part)))
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
