"""Counter-based random substreams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, *key)``. Paths are grouped into fixed-size blocks and each
(block, window) pair gets its own substream, so a path's noise depends only on
the global seed, its index and the window index. Scheduling blocks on several
threads, or changing ``n_paths``, never changes the noise of an existing path.
"""

from __future__ import annotations

import numpy as np

BLOCK_SIZE = 4096

# stream tags keep unrelated consumers of the same seed apart
TAG_FORWARD = 0
TAG_JUMP_TRAIN = 1
TAG_SCENARIO = 2


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *key)``."""
    if seed < 0 or any(k < 0 for k in key):
        raise ValueError("seed and key components must be non-negative")
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in key)])
    return np.random.Generator(np.random.Philox(ss))


def blocks(n_paths: int, block_size: int = BLOCK_SIZE):
    """Yield ``(block_index, start, stop)`` covering ``range(n_paths)``."""
    for b, start in enumerate(range(0, n_paths, block_size)):
        yield b, start, min(start + block_size, n_paths)


def derive_seed(seed: int, *key: int) -> int:
    """A fresh 63-bit seed, deterministic in ``(seed, *key)``."""
    ss = np.random.SeedSequence([int(seed), TAG_SCENARIO, *(int(k) for k in key)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
