"""Seeded counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from a root seed plus a tuple of labels (strings or integers), e.g.
``substream(seed, "patient", 17)``.  Two streams with the same labels are
identical, streams with different labels are independent, and the result never
depends on the order in which streams are created.  This is what keeps parallel
or reordered work reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np

Label = "str | int"


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"negative stream label {label}")
        return int(label)
    if isinstance(label, str):
        # crc32 is stable across interpreter runs, unlike hash().
        return zlib.crc32(label.encode("utf-8"))
    raise TypeError(f"stream labels must be str or int, got {type(label).__name__}")


def substream(seed: int, *labels) -> np.random.Generator:
    """Return the generator for ``seed`` refined by ``labels``."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    key = tuple(_label_to_int(lab) for lab in labels)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from ``rng`` for handing to ``substream``."""
    return int(rng.integers(0, 2**63 - 1))
