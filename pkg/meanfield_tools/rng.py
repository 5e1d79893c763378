"""Seed discipline for reproducible Monte Carlo runs.

Every random quantity is drawn from a stream addressed by the master seed, a
stream kind and a cell key. Streams are built with ``SeedSequence`` spawn keys
on the counter-based Philox generator, so adding replicas or widths to a sweep
never changes the draws of cells that already existed.
"""

from enum import IntEnum

import numpy as np

from .constants import MAX_SEED
from .exceptions import InvalidInputError


class StreamKind(IntEnum):
    INIT = 0
    DATA = 1
    REFERENCE = 2
    SPDE = 3
    SYNTHETIC = 4


def validate_seed(seed: int) -> int:
    """Return ``seed`` if it is an unsigned 64-bit integer."""
    if isinstance(seed, bool) or not isinstance(seed, int):  # type: ignore[reportUnnecessaryIsInstance]
        raise InvalidInputError(f"Seed must be an integer, got {seed!r}")
    if not 0 <= seed <= MAX_SEED:
        raise InvalidInputError(f"Seed must lie in [0, 2^64 - 1], got {seed}")
    return seed


def stream(master_seed: int, kind: StreamKind, *key: int) -> np.random.Generator:
    """Independent generator for ``(kind, *key)`` under ``master_seed``."""
    validate_seed(master_seed)
    spawn_key = (int(kind), *(int(k) for k in key))
    sequence = np.random.SeedSequence(master_seed, spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(sequence))


def replica_streams(
    master_seed: int, replica: int, width: int
) -> tuple[np.random.Generator, np.random.Generator]:
    """Initialization and data streams owned by one replica."""
    return (
        stream(master_seed, StreamKind.INIT, replica, width),
        stream(master_seed, StreamKind.DATA, replica, width),
    )
