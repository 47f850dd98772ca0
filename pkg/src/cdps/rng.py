"""Counter-based random streams keyed by (master seed, index...)."""

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *keys)``.

    The same key always yields the same stream, so per-sample results do not
    depend on how work is split across workers.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))
