"""Word semantics and deterministic coin streams.

A machine word is one unsigned 64-bit value.  All budgets (bandwidth,
memory) are counted in words.  Structured program state is measured by
counting its word leaves.
"""

from __future__ import annotations

import hashlib

WORD_BITS = 64
WORD_MAX = (1 << WORD_BITS) - 1


def is_word(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and 0 <= x <= WORD_MAX


def check_word(x, what: str = "value") -> int:
    if not is_word(x):
        raise ValueError(f"{what} is not a machine word: {x!r}")
    return x


def words_in(obj, _cache: dict | None = None) -> int:
    """Number of word leaves in a nested structure of ints/tuples/lists.

    ``None`` counts as zero words.  Dicts count keys and values.  An
    optional id-keyed cache lets callers skip re-measuring unchanged
    (immutable, reused) state objects between rounds.
    """
    if _cache is not None:
        key = id(obj)
        hit = _cache.get(key)
        if hit is not None and hit[0] is obj:
            return hit[1]
    n = _measure(obj)
    if _cache is not None:
        _cache[id(obj)] = (obj, n)
    return n


def _measure(obj) -> int:
    if obj is None:
        return 0
    if isinstance(obj, bool):
        return 1
    if isinstance(obj, int):
        return 1
    total = 0
    stack = [obj]
    while stack:
        cur = stack.pop()
        if cur is None:
            continue
        if isinstance(cur, bool) or isinstance(cur, int):
            total += 1
        elif isinstance(cur, (tuple, list)):
            stack.extend(cur)
        elif isinstance(cur, (set, frozenset)):
            stack.extend(cur)
        elif isinstance(cur, dict):
            stack.extend(cur.keys())
            stack.extend(cur.values())
        elif isinstance(cur, str):
            # Rare; count one word per character's codepoint for safety.
            total += len(cur)
        else:
            raise TypeError(f"unmeasurable state component: {type(cur).__name__}")
    return total


def coin(seed: int, *key: int) -> int:
    """Deterministic 64-bit value keyed by (seed, key...).

    Counter-based: independent of evaluation order, stable across
    platforms and processes.  Used by graph generators so that e.g.
    edge-membership coins depend only on the edge, not on iteration
    order.
    """
    h = hashlib.blake2b(digest_size=8, key=seed.to_bytes(8, "big", signed=False))
    for k in key:
        h.update(int(k).to_bytes(16, "big", signed=True))
    return int.from_bytes(h.digest(), "big")


def coin_bit(seed: int, *key: int) -> int:
    return coin(seed, *key) & 1


def coin_below(seed: int, bound: int, *key: int) -> int:
    """Uniform-ish value in [0, bound) (rejection-free; bias < 2^-40 for
    bounds used here)."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    return coin(seed, *key) % bound
