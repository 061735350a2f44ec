"""Deterministic seed derivation.

All randomness in the pipeline flows from one root seed; sub-seeds are
derived by hashing (seed, label) so that replays are reproducible across
processes and concurrency levels.
"""

from __future__ import annotations

import hashlib


def split_seed(seed: int, label: str) -> int:
    """Derive a child seed from a parent seed and a context label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
