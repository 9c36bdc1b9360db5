"""Deterministic random-stream management.

Every stage of a run draws from a named substream derived from the single
top-level seed, so one integer reproduces the whole experiment and stages
cannot perturb each other's draws.
"""

from __future__ import annotations

import numpy as np

# Fixed ids: changing them changes every derived stream.
STREAM_IDS = {
    "split": 0,
    "train": 1,
    "eval": 2,
    "robustness": 3,
    "init": 4,
    "synth": 5,
}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for the named substream of ``seed``.

    ``extra`` integers (epoch index, user index, ...) split the stream
    further; the same tuple always yields the same generator state.
    """
    if name not in STREAM_IDS:
        raise ValueError(f"unknown stream name: {name!r}")
    entropy = [int(seed), STREAM_IDS[name], *[int(e) for e in extra]]
    return np.random.default_rng(np.random.SeedSequence(entropy))
