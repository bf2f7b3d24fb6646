# Reproducible randomness and ordered parallel evaluation
# Every scene, episode or candidate gets its own counter-based (Philox)
# stream keyed by (seed, purpose, index), so results never depend on the
# thread count or on evaluation order.

from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar, Union

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

StreamKey = Union[int, str]


def _key_word(key: StreamKey) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def scene_rng(seed: int, *keys: StreamKey) -> np.random.Generator:
    """Independent Philox generator for the stream (seed, *keys).

    String keys name a purpose ("scene", "episode", ...), integer keys index
    items inside it.
    """
    entropy = [_key_word(seed)] + [_key_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` to key a family of sub-streams."""
    return int(rng.integers(0, 2 ** 63 - 1))


def default_threads() -> int:
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """``[fn(item) for item in items]`` on a thread pool; output order = input order."""
    items = list(items)
    workers = min(threads or default_threads(), max(len(items), 1))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
