"""Seeded random streams.

All randomness in the package flows through :func:`seeded_rng`, which
returns a numpy ``Generator`` over the PCG64 bit generator. PCG64's raw
output for a given seed is fixed by numpy across platforms; the package
only draws through ``random``, ``integers``, ``normal`` and
``permutation``.
"""

import numpy as np


def seeded_rng(seed):
    """Deterministic generator for an unsigned 64-bit ``seed``."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def rng_state(rng):
    """JSON-serialisable snapshot of ``rng``."""
    return rng.bit_generator.state


def restore_rng(state):
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
