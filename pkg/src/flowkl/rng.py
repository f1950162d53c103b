"""Counter-based, splittable random streams.

Every stream is a Philox generator keyed by ``(root seed, purpose tags...)``.
Tags are hashed into the spawn key of a :class:`numpy.random.SeedSequence`, so
two calls with the same key always produce the same numbers and streams with
different tags are statistically independent. Estimators that must share
"common random numbers" simply ask for the same key.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable

import numpy as np


def _tag_word(tag) -> int:
    if isinstance(tag, (int, np.integer)) and tag >= 0:
        return int(tag)
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: int, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag_word(t) for t in tags))


def stream(seed: int, *tags) -> np.random.Generator:
    """Return the generator for ``(seed, *tags)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *tags)))


def normals(seed: int, tags: tuple, n: int, d: int) -> np.ndarray:
    """Standard normal block of shape ``(n, d)``; row ``i`` depends only on the key and ``i``."""
    return stream(seed, *tags).standard_normal((n, d))


def shard_normals(seed: int, tags: tuple, n: int, d: int, shard_size: int = 8192) -> np.ndarray:
    """Same contract as :func:`normals` but drawn shard by shard.

    Shard ``k`` uses the sub-key ``(*tags, "shard", k)``; the result does not
    depend on how many workers produce the shards.
    """
    out = np.empty((n, d))
    for k, start in enumerate(range(0, n, shard_size)):
        stop = min(n, start + shard_size)
        out[start:stop] = stream(seed, *tags, "shard", k).standard_normal((stop - start, d))
    return out


def fsum_mean(values: Iterable[float]) -> float:
    """Order-fixed compensated mean."""
    arr = np.asarray(values, dtype=float).ravel()
    return math.fsum(arr.tolist()) / arr.size


def mean_and_stderr(values) -> tuple[float, float]:
    """Sample mean and standard error, both via compensated summation."""
    arr = np.asarray(values, dtype=float).ravel()
    n = arr.size
    if n < 2:
        raise ValueError("standard error needs at least two samples")
    m = math.fsum(arr.tolist()) / n
    var = math.fsum(((arr - m) ** 2).tolist()) / (n - 1)
    return m, math.sqrt(var / n)
