"""Named random substreams: every piece of randomness hangs off one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Deterministic generator for (seed, label); independent across labels."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(label.encode("utf-8"))])))
