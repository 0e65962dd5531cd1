"""Deterministic random-stream derivation.

Every stochastic operation in the package draws from a ``numpy`` PCG64
generator seeded through :class:`numpy.random.SeedSequence`.  Independent
streams are derived from a root seed plus a key path (e.g. frame id, agent
id, operation name), so parallel per-frame evaluation reproduces the serial
results bit for bit.  The derivation below is part of the on-disk dataset
contract: regenerating a dataset from the same root seed must yield
identical bytes.

Key parts may be ints or strings.  Strings are folded to 64-bit ints with
BLAKE2s so the mapping is stable across platforms and Python processes
(unlike the builtin ``hash``).
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream_key", "derive_rng", "derive_seed"]

_MASK64 = 0xFFFFFFFFFFFFFFFF


def stream_key(part) -> int:
    """Map a key part (int or str) to a stable non-negative 64-bit int."""
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    if isinstance(part, str):
        digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream key parts must be int or str, got {type(part).__name__}")


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Return a PCG64 generator for the stream ``(seed, *parts)``.

    The same arguments always produce the same stream; distinct key paths
    produce statistically independent streams.
    """
    entropy = [stream_key(seed)] + [stream_key(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(*parts) -> int:
    """Fold a key path into a single stable 64-bit sub-seed.

    Used where an operation takes a scalar seed (e.g. per-frame, per-agent
    corruption seeds) rather than a generator.
    """
    if not parts:
        raise ValueError("derive_seed needs at least one key part")
    h = hashlib.blake2s(digest_size=8)
    for part in parts:
        h.update(stream_key(part).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")
