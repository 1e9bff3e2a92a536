"""Deterministic seeding and hashing helpers shared across the package."""

import hashlib
import json

import numpy as np


def stable_u64(text: str) -> int:
    """Map a string to a platform-independent 64-bit integer.

    Python's built-in hash() is salted per process, so every reproducible
    RNG derivation goes through this instead.
    """
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_from(*parts) -> np.random.Generator:
    """Build a Generator from a mix of ints and strings.

    String parts are hashed with stable_u64; the full tuple feeds a
    SeedSequence, so distinct part tuples give independent streams.
    """
    entropy = [p if isinstance(p, int) else stable_u64(str(p)) for p in parts]
    return np.random.default_rng(entropy)


def config_digest(payload: dict, length: int = 12) -> str:
    """Short hex digest of a JSON-serializable mapping, key-order independent."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:length]
