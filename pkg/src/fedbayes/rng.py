"""Deterministic random-stream derivation.

Every source of randomness in the simulator is a counter-based generator
keyed by the global seed plus an integer path. Streams with different
purposes use disjoint namespace tags so that consuming draws in one context
(say, cluster selection) never shifts the draws seen by another (the local
update loop). This is what makes runs bit-reproducible and lets degenerate
configurations coincide exactly with their simpler counterparts.
"""
from __future__ import annotations

import numpy as np

# Namespace tags. Appending new tags is safe; reordering is a breaking change
# because it re-keys every stream.
UPDATE = 0  # client local-update loop: minibatch indices + noise draws
SELECT = 1  # cluster-identity selection draws
INIT_GLOBAL = 2  # server-side parameter banks, keyed by entry index
INIT_PERSONAL = 3  # per-client personal parameters
PARTITION = 4  # dataset partitioning
PLAN = 5  # per-round participant sampling
DATA = 6  # synthetic dataset generation
PREDICT = 7  # posterior draws for prediction / uncertainty


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the counter-based generator for the given (seed, path) key."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(key))
