"""Named deterministic rng streams.

Every stochastic consumer gets its own stream keyed by (seed, purpose), so
adding draws to one consumer never shifts another's sequence and fixed seeds
reproduce losses and corpora bitwise.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 0,
    "data": 1,
    "mask": 2,
    "dropout": 3,
    "itm": 4,
    "mdo": 5,
    "probe": 6,
}


def stream_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], *extra]))


def derive_seed(seed: int, name: str, *extra: int) -> int:
    """A child integer seed (for APIs that take a plain seed)."""
    ss = np.random.SeedSequence([int(seed), STREAMS[name], *extra])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)  # keep it int64-safe
