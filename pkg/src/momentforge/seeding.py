"""Deterministic seed derivation.

All randomness in the package flows from one explicit run seed; per-item
and per-step seeds are derived by hashing the parent seed with a tag, so
work can be parallelised or resumed without disturbing the stream.
"""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(seed: int, tag: str) -> int:
    """A child seed fully determined by (seed, tag)."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
