"""Deterministic random substreams.

A single run seed fans out to independent substreams per component
(simulation, training, VI, SIR, ...) via a counter-based derivation, so
parallelizable phases stay reproducible regardless of execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    digest = hashlib.md5(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed: int, *tags) -> np.random.Generator:
    """Generator for the substream identified by (seed, *tags)."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_tag_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
