"""Deterministic keyed randomness.

Every stochastic site in the simulator draws from a stream derived from a
key tuple (master seed, site label, entity ids, cycle, ...).  Draws depend
only on the key, never on evaluation order or worker count, so a run is
reproducible bit-for-bit from its seed.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


def _key_bytes(parts: tuple) -> bytes:
    chunks = []
    for p in parts:
        if isinstance(p, bool):
            chunks.append(b"?" + bytes([p]))
        elif isinstance(p, int):
            chunks.append(b"i" + p.to_bytes(16, "little", signed=True))
        elif isinstance(p, str):
            raw = p.encode("utf-8")
            chunks.append(b"s" + len(raw).to_bytes(4, "little") + raw)
        elif isinstance(p, bytes):
            chunks.append(b"b" + p)
        else:
            raise TypeError(f"unsupported stream key part: {p!r}")
    return b"\x1f".join(chunks)


def digest64(*parts) -> int:
    """A 64-bit integer derived from the key parts, uniform on [0, 2^64)."""
    h = hashlib.blake2b(_key_bytes(parts), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def unit_uniform(*parts) -> float:
    """One uniform draw strictly inside (0, 1), keyed by the parts."""
    # 53 significant bits; the offset keeps 0 out of the range.
    return (digest64(*parts) >> 11) * 2.0**-53 + 2.0**-54


def unit_normal(*parts) -> float:
    """One standard normal draw keyed by the parts (Box-Muller)."""
    u1 = unit_uniform(*parts, 0)
    u2 = unit_uniform(*parts, 1)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def rng(*parts) -> np.random.Generator:
    """A numpy Generator whose state depends only on the key parts."""
    h = hashlib.blake2b(_key_bytes(parts), digest_size=32).digest()
    words = [int.from_bytes(h[i : i + 4], "little") for i in range(0, 32, 4)]
    return np.random.default_rng(np.random.SeedSequence(words))
