"""Counter-based random streams keyed by (master seed, replica, purpose)."""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "tag_key"]


def tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, replica: int = 0, tag: str = "main") -> np.random.Generator:
    """A Philox generator whose key is derived from ``(seed, replica, crc32(tag))``.

    Distinct replicas or tags never share a stream, and the same triple
    always reproduces the same draws.
    """
    if seed < 0 or replica < 0:
        raise ValueError("seed and replica must be non-negative")
    ss = np.random.SeedSequence([int(seed), int(replica), tag_key(tag)])
    return np.random.Generator(np.random.Philox(ss))
