"""Keyed counter-based random streams.

Every random draw in the lab comes from a stream whose state is a pure function of
``(master_seed, purpose, round[, worker])``. Workers therefore regenerate the shared
round permutation without talking to each other, and the order in which streams are
created never changes what they produce.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from enum import Enum

import numpy as np
from cachetools import LRUCache, cached

from core.errors import InvalidParameterError


class Purpose(str, Enum):
    COORD_PERM = "coord_perm"
    WORKER_PERM = "worker_perm"
    THETA = "theta"
    RANDK = "randk"
    QUANTIZE = "quantize"
    XHAT = "xhat"
    TASK = "task"
    SAMPLING = "sampling"


_SHARED_WORKER = 0xFFFFFFFF


def stream_key(master_seed: int, purpose: Purpose | str, round_: int, worker: int | None = None) -> int:
    """Hash the stream coordinates into a 128-bit Philox key."""
    label = purpose.value if isinstance(purpose, Purpose) else str(purpose)
    digest = hashlib.blake2b(digest_size=16)
    slot = _SHARED_WORKER if worker is None else worker
    digest.update(struct.pack("<QQI", master_seed & (2**64 - 1), round_, slot))
    digest.update(label.encode("utf-8"))
    return int.from_bytes(digest.digest(), "little")


def make_stream(
    master_seed: int, purpose: Purpose | str, round_: int = 0, worker: int | None = None
) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, purpose, round_, worker)))


def sample_permutation(length: int, stream: np.random.Generator) -> np.ndarray:
    """Uniform permutation of ``0..length-1`` drawn by a Fisher-Yates shuffle of the stream."""
    if length < 1:
        raise InvalidParameterError(f"Permutation length must be positive, got {length}")
    return stream.permutation(length)


_permutation_cache: LRUCache = LRUCache(maxsize=512)


@cached(_permutation_cache, lock=threading.Lock())
def shared_permutation(master_seed: int, purpose: Purpose, round_: int, length: int) -> np.ndarray:
    """Round permutation shared by all workers; memoized so n workers draw it once."""
    perm = sample_permutation(length, make_stream(master_seed, purpose, round_))
    perm.setflags(write=False)
    return perm


def gaussian(stream: np.random.Generator, size: int | tuple[int, ...]) -> np.ndarray:
    """Standard normal draws via the Box-Muller transform of the stream's uniforms."""
    u1 = 1.0 - stream.random(size)
    u2 = stream.random(size)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
