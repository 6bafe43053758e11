"""Deterministic per-component random streams derived from one root seed.

Every run owns a single root seed; each component derives its own stream by
hashing a stable label into the spawn key, so adding draws to one component
never shifts another component's stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed_sequence(root_seed, label):
    return np.random.SeedSequence(root_seed, spawn_key=(zlib.crc32(label.encode("utf-8")),))


def derive_rng(root_seed, label):
    return np.random.default_rng(derive_seed_sequence(root_seed, label))
