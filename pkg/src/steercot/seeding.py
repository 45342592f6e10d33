"""Seed splitting: every stage seed is a hash of the run seed and a label path."""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *labels) -> int:
    """63-bit seed from ``sha256(root | label | ...)``; stable across platforms."""
    h = hashlib.sha256(str(int(root)).encode())
    for label in labels:
        h.update(b"|")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1
