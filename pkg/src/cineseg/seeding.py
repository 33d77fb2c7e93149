"""Stable seed derivation for reproducible sub-streams."""

import hashlib


def derive_seed(*parts) -> int:
    """Map a tuple of labels/ints to a 63-bit seed, stably across processes.

    Python's builtin hash() is randomized per process; this must not be.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFFFFFFFFFF
