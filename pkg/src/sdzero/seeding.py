"""Stable seed derivation.

Every random stream in the pipeline is seeded by mixing structured parts
(run seed, pool tag, instance seed, replicate index) into a single 64-bit
value. The mix must be stable across processes and Python versions, so it
never touches Python's randomized str hash.
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Sebastiano Vigna's splitmix64 finalizer; full-period 64-bit mixer.
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _part_to_int(part: int | str | bytes) -> int:
    if isinstance(part, bool):
        raise TypeError("bool is not a valid seed part")
    if isinstance(part, int):
        return part & _MASK
    if isinstance(part, str):
        part = part.encode("utf-8")
    if isinstance(part, bytes):
        return int.from_bytes(hashlib.sha256(part).digest()[:8], "little")
    raise TypeError(f"cannot derive a seed from {type(part).__name__}")


def derive_seed(*parts: int | str | bytes) -> int:
    """Mix parts into a 64-bit seed. Order-sensitive, collision-resistant."""
    if not parts:
        raise ValueError("derive_seed needs at least one part")
    state = 0x5D2A9C5FB0E0751D
    for part in parts:
        state = _splitmix64(state ^ _part_to_int(part))
    return state
