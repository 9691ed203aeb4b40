"""Named random substreams derived from a single root seed.

Every source of randomness in the package (parameter init, encoder noise,
dropout masks, the subgraph sampler, synthetic generation) pulls an
independent generator from here, so results are reproducible across
refactors that reorder calls.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _path_entropy(path: tuple) -> list[int]:
    text = "/".join(str(p) for p in path)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    # four 64-bit words from the hash keep distinct paths far apart
    return [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8, 16, 24)]


def substream(root_seed: int, *path) -> np.random.Generator:
    """Independent generator for (root_seed, path), stable across platforms."""
    entropy = [int(root_seed) & _MASK64] + _path_entropy(path)
    return np.random.default_rng(np.random.SeedSequence(entropy))
