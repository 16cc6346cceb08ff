"""Deterministic random streams derived from one root seed.

Every consumer gets its own counter-based Philox stream keyed by the
root seed plus a label, so adding a stage never perturbs the draws of
another.  Reproducibility is promised within one build of this package,
not across languages or numpy versions.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(root_seed: int, *labels) -> np.random.Generator:
    """Child generator for (root_seed, labels...).

    Labels may be strings or ints; strings hash via crc32 so the spawn
    key is stable across runs.
    """
    key = []
    for lab in labels:
        if isinstance(lab, str):
            key.append(zlib.crc32(lab.encode("utf-8")))
        else:
            key.append(int(lab) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))
