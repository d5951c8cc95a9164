"""Stable seed derivation, independent of scheduling order and PYTHONHASHSEED."""

from __future__ import annotations

import zlib

import numpy as np


def _as_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(*parts) -> int:
    """Mix arbitrary ints/strings into one 32-bit seed."""
    ss = np.random.SeedSequence([_as_int(p) for p in parts])
    return int(ss.generate_state(1)[0])


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_as_int(p) for p in parts]))
