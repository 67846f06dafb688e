"""Seed derivation and counter-based random streams."""
import hashlib

import numpy as np


def derive_seed(seed, *labels):
    """Derive a 64-bit sub-seed from a parent seed and a sequence of labels.

    The mapping is a keyed hash, so sub-seeds for different labels are
    independent and do not depend on call order.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed, *labels):
    """Return a Philox-backed generator keyed by ``(seed, *labels)``."""
    key = derive_seed(seed, *labels) if labels else int(seed) % (1 << 64)
    return np.random.Generator(np.random.Philox(key=key))
