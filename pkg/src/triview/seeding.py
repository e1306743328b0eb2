"""Deterministic seed derivation for named random substreams.

Every pipeline stage draws from its own substream derived from one root
seed, so stages can be reproduced independently of each other.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(root: int, *names: str) -> int:
    """Derive a 64-bit seed from a root seed and a path of stream names."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") & MASK64


def substream(root: int, *names: str) -> np.random.Generator:
    """A numpy generator seeded from the named substream of ``root``."""
    return np.random.default_rng(derive_seed(root, *names))
