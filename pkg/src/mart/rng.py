"""Named random streams: one seed fans out into independent, reproducible generators."""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for ``name`` under ``seed``; distinct names never share state."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))
