"""Stable hashing helpers.

Everything that needs run-to-run reproducibility (per-example trigger RNG,
sweep cell seeds, cache keys, feature buckets) goes through these functions
instead of Python's salted builtin ``hash``.
"""

from __future__ import annotations

import hashlib
import random

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; the documented hash for feature bucketing."""
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _U64
    return h


def stable_u64(*parts: object) -> int:
    """Collapse a tuple of printable parts to a 64-bit integer, platform-independently."""
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


def derive_rng(*parts: object) -> random.Random:
    """Deterministic per-key RNG stream, e.g. derive_rng(seed, salt, example_id)."""
    return random.Random(stable_u64(*parts))


def content_key(*parts: str) -> str:
    """Content-addressed cache key over (generator id, template id, input text)."""
    payload = "\x00".join(parts).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()
