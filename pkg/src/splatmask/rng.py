"""Explicitly keyed random substreams.

Every random draw in the package comes from a Philox (counter-based) generator whose key
is derived from the global seed plus a tuple of stream labels, e.g.
``substream(seed, "views", iteration, sample)``. Draws therefore never depend on call
order or on how work is split across workers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("substream keys must be non-negative")
        return int(label)
    digest = hashlib.sha256(str(label).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *keys) -> np.random.Generator:
    entropy = [_label_to_int(seed)] + [_label_to_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
