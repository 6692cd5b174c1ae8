"""Counter-based random streams.

Every stream is keyed by ``(seed, *key)`` so that results never depend on the
order or the thread in which streams are consumed.
"""

import numpy as np


def stream(seed, *key):
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
