"""Seeded, purpose-split random streams.

Every random draw in the library goes through :func:`make_rng`, which keys a
Philox counter-based generator with a hash of ``(seed, *purpose)``. Two streams
with different purposes are statistically independent, and a stream's output
does not depend on how many other streams were consumed before it.
"""

import hashlib

import numpy as np


def stream_key(seed, *purpose):
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((int(seed),) + tuple(str(p) for p in purpose)).encode())
    return np.frombuffer(h.digest(), dtype=np.uint64).copy()


def make_rng(seed, *purpose):
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *purpose)))
