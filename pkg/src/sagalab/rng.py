"""Order-independent random streams keyed by a root seed and a path.

Each stream is a Philox counter-based generator whose key is a hash of
``(root_seed, *path)``, so a stream never depends on how many other streams
were drawn before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

CHAIN = "chain"          # initial z_T of a denoising chain
PRIOR_EPS = "prior-eps"  # eps draws inside the prior optimizer
SOLVER = "solver"        # noise injected by ancestral solver steps
PRIOR_SAMPLE = "prior-sample"  # final draw(s) from the learned prior


def stream_key(root_seed: int, *path) -> np.ndarray:
    """128-bit Philox key derived from the seed and path components."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for part in path:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return np.frombuffer(h.digest()[:16], dtype=np.uint64).copy()


def stream(root_seed: int, *path) -> np.random.Generator:
    """Independent generator for ``path`` under ``root_seed``."""
    return np.random.Generator(np.random.Philox(key=stream_key(root_seed, *path)))
