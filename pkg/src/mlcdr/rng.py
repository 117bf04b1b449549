"""Seed derivation for reproducible parallel work.

Every stream is a Philox (counter-based) generator keyed by a tuple such as
``(seed, replication)``, so results do not depend on scheduling order.
"""
from __future__ import annotations

import numpy as np


def derive_generator(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """Integer seed for APIs that take ints (e.g. fold splitting)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) for k in keys)])
    return int(ss.generate_state(1, np.uint32)[0])
