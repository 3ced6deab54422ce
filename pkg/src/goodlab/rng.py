"""Deterministic named random streams.

Every stochastic site in the package draws from its own Philox stream keyed
by a hash of (seed, site label). Streams are independent of each other and of
the order in which they are created, so adding a new sampling site never
perturbs the draws of existing ones.
"""

import hashlib

import numpy as np

__all__ = ["stream"]


def stream(seed: int, label: str) -> np.random.Generator:
    """Return the generator for stochastic site `label` under `seed`."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
