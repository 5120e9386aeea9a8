"""Deterministic named RNG substreams derived from one experiment seed.

Each pipeline stage (data, split, init, mask, epsilon, shuffle) draws from
its own stream, so changing how much randomness one stage consumes never
desynchronizes the others.
"""

import zlib

import numpy as np

STREAM_NAMES = ("data", "split", "init", "mask", "epsilon", "shuffle")


def named_stream(seed: int, name: str) -> np.random.Generator:
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
