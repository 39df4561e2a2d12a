"""Named random streams derived from one master seed.

Every generator in the package comes from ``derive_rng(master, stream, frame,
purpose)``. The key tuple feeds ``numpy.random.SeedSequence`` as its spawn key,
so two keys that differ in any position give statistically independent streams,
and the same key always reproduces the same stream.

Stream ids:

    0  pretraining scenes
    1  held-out clean scenes
    2  target (CTTA) stream

Frame is the position inside the stream (0 for stream-independent draws).
"""

from __future__ import annotations

import numpy as np

STREAM_PRETRAIN = 0
STREAM_HELDOUT = 1
STREAM_TARGET = 2

PURPOSES = {
    "init": 0,
    "scene": 1,
    "corrupt": 2,
    "dropout": 3,
    "mc": 4,
    "order": 5,
}


def derive_rng(master: int, stream: int, frame: int, purpose: str, *extra: int) -> np.random.Generator:
    key = (int(stream), int(frame), PURPOSES[purpose], *map(int, extra))
    return np.random.default_rng(np.random.SeedSequence(int(master), spawn_key=key))


def make_rng(seed) -> np.random.Generator:
    """Generator from an int, a tuple of ints, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        head, *rest = seed
        return np.random.default_rng(np.random.SeedSequence(int(head), spawn_key=tuple(int(r) for r in rest)))
    return np.random.default_rng(int(seed))
