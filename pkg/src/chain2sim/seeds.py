"""Stable per-stream seed derivation.

Every random stream in a scenario (one profile generator per user, one
channel per link, the pairing delays) gets its own seed derived from the
master seed plus a label path, so that adding, removing or reordering
users never shifts anybody else's stream.  SHA-256 keeps the derivation
stable across platforms and Python versions, unlike `hash()`.
"""

from __future__ import annotations

import hashlib


def derive(master_seed: int, *path: str | int) -> int:
    """Derive a 63-bit child seed from a master seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for part in path:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1
