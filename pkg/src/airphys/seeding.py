"""Named random streams derived from one master seed.

Every consumer asks for a stream by name (``"init"``, ``"dropout"``,
``"shuffle"``, ``"bootstrap"`` ...), so adding a consumer never shifts the
draws seen by another one.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_words(names) -> list[int]:
    digest = hashlib.sha256("\x1f".join(str(n) for n in names).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def derive_seed(master: int, *names) -> int:
    """Deterministic 63-bit seed for the stream ``names`` under ``master``."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *_name_words(names)])
    lo, hi = (int(w) for w in ss.generate_state(2, dtype=np.uint32))
    return (lo | (hi << 32)) >> 1


def stream(master: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))
