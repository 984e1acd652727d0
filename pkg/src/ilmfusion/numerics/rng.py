"""Seeded random streams.

All randomness flows through numpy's PCG64 bit generator, whose output is
specified and identical across platforms for a given seed.  Independent
sub-streams for different pipeline stages are derived from a master seed
and a string label, so adding a stage never perturbs the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit seed for stage ``label`` under master ``seed``."""
    seq = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode("utf-8"))])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def stage_rng(seed: int, label: str) -> np.random.Generator:
    return make_rng(derive_seed(seed, label))
