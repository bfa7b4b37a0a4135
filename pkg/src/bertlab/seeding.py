"""Named RNG substreams so every source of randomness hangs off one run seed.

A substream is identified by (seed, name). Derivation goes through SHA-256, so
streams for different names are independent and stable across platforms and
numpy versions.
"""

import hashlib

import numpy as np


def substream_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named substream of a run seed."""
    return np.random.Generator(np.random.PCG64(substream_seed(seed, name)))
