"""Seeded random streams.

Every experiment seed fans out into independent, named streams so that
adding a draw to one component never shifts the draws of another. Streams
are derived with :class:`numpy.random.SeedSequence` spawn keys and consumed
through PCG64 generators, which are platform independent.
"""

import numpy as np

STREAMS = (
    "feature-map",
    "buffer",
    "weights",
    "noise",
    "adapters",
    "mask",
    "base",
    "check",
)


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a fresh generator for the named stream of ``seed``."""
    try:
        key = STREAMS.index(name)
    except ValueError:
        raise KeyError(f"unknown random stream {name!r}; expected one of {STREAMS}") from None
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))
