"""Fixed-weight binary vectors: enumeration, colex ranking, and seeded sampling."""

from __future__ import annotations

import itertools
import math

import numpy as np


def enumerate_vectors(n: int, s: int | None = None) -> np.ndarray:
    """All binary vectors of length ``n`` (with exactly ``s`` ones if given), one per row."""
    if s is None:
        return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8).reshape(-1, n)
    out = np.zeros((math.comb(n, s), n), dtype=np.int8)
    for row, ones in enumerate(itertools.combinations(range(n), s)):
        out[row, list(ones)] = 1
    return out


def rank_subset(subset) -> int:
    """Colex rank of a sorted subset of ``{0, ..., n-1}``."""
    return sum(math.comb(c, j + 1) for j, c in enumerate(sorted(subset)))


def unrank_subset(r: int, n: int, k: int) -> list[int]:
    """The ``k``-subset of ``{0, ..., n-1}`` with colex rank ``r``."""
    if not 0 <= r < math.comb(n, k):
        raise ValueError(f"rank {r} out of range for C({n}, {k})")
    out = [0] * k
    while k > 0:
        lo, hi = k - 1, n - 1
        # largest c in [k-1, n-1] with comb(c, k) <= r
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if math.comb(mid, k) <= r:
                lo = mid
            else:
                hi = mid - 1
        r -= math.comb(lo, k)
        k -= 1
        out[k] = lo
        n = lo
    return out


def _randbelow(rng: np.random.Generator, upper: int) -> int:
    if upper <= 2**62:
        return int(rng.integers(0, upper))
    nbytes = (upper.bit_length() + 7) // 8
    mask = (1 << upper.bit_length()) - 1
    while True:
        r = int.from_bytes(rng.bytes(nbytes), "little") & mask
        if r < upper:
            return r


def floyd_sample(rng: np.random.Generator, population: int, k: int) -> list[int]:
    """``k`` distinct integers from ``range(population)`` (Floyd's algorithm), sorted."""
    if k > population:
        raise ValueError("sample larger than population")
    chosen: set[int] = set()
    for j in range(population - k, population):
        t = _randbelow(rng, j + 1)
        chosen.add(j if t in chosen else t)
    return sorted(chosen)


def stratum_rng(seed: int, n: int, s: int) -> np.random.Generator:
    """Independent stream for stratum ``(n, s)``; unaffected by which other strata are drawn."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(n, s))))


def sample_stratum(n: int, s: int, k: int, seed: int) -> np.ndarray:
    """Simple random sample of ``min(k, C(n, s))`` vectors with ``s`` ones, shape (k_sn, n).

    A stratum no larger than ``k`` is returned whole, in colex order.
    """
    size = math.comb(n, s)
    if k >= size:
        ranks = range(size)
    else:
        ranks = floyd_sample(stratum_rng(seed, n, s), size, k)
    out = np.zeros((len(ranks), n), dtype=np.int8)
    for row, r in enumerate(ranks):
        out[row, unrank_subset(r, n, s)] = 1
    return out
