"""Deterministic seed derivation: one master seed fans out into named
streams (data/init/noise/sampling/...) so each component is independently
reproducible regardless of what the others consumed.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Stable 64-bit sub-seed from a master seed and a label path."""
    key = ":".join([str(int(master))] + [str(l) for l in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master: int, *labels) -> np.random.Generator:
    """Named deterministic RNG stream."""
    return np.random.default_rng(derive_seed(master, *labels))
