"""Deterministic seed derivation.

All randomness in the package flows from one base seed.  Each consumer
(scene rendering, mask perturbation, batch sampling, parameter init,
probe splits, ...) derives its own stream by hashing the base seed
together with a purpose tag, so any stage can be replayed in isolation
and no two stages share a stream by accident.
"""

import hashlib


def derive_seed(base: int, *tags) -> int:
    """Return a 63-bit seed derived from ``base`` and the given tags.

    The derivation is a SHA-256 hash of the decimal base seed joined
    with the string form of each tag, so it is stable across platforms
    and interpreter versions.
    """
    text = ":".join([str(int(base))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
