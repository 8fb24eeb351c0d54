"""Small shared helpers: seeded RNG derivation, hashing, apportionment."""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Derive an independent generator from a base seed and a tag path.

    The same (seed, tags) pair always yields the same stream, and distinct
    tag paths give decorrelated streams, so every consumer stays
    reproducible without sharing generator state.
    """
    text = "/".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def content_hash(arrays: Sequence[np.ndarray]) -> str:
    """SHA-256 over the shapes and raw bytes of `arrays`, in order."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def largest_remainder(total: int, weights: Sequence[float],
                      tie_keys: Sequence | None = None) -> list[int]:
    """Apportion `total` indivisible units proportionally to `weights`.

    Floor quotas first, then hand out the remaining units by descending
    fractional remainder. Ties go to the smaller tie key (list position
    when no keys are given).
    """
    if total < 0:
        raise ValueError("total must be non-negative")
    if len(weights) == 0:
        raise ValueError("weights must be non-empty")
    w = [float(x) for x in weights]
    if any(x <= 0 for x in w):
        raise ValueError("weights must be positive")
    keys = list(tie_keys) if tie_keys is not None else list(range(len(w)))
    if len(keys) != len(w):
        raise ValueError("tie_keys must match weights in length")
    s = sum(w)
    quotas = [total * x / s for x in w]
    sizes = [int(np.floor(q)) for q in quotas]
    short = total - sum(sizes)
    order = sorted(range(len(w)), key=lambda i: (-(quotas[i] - sizes[i]), keys[i]))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def chunked(items: Sequence, size: int) -> list:
    """Split a sequence into consecutive chunks of at most `size` items."""
    if size <= 0:
        raise ValueError("chunk size must be positive")
    return [items[i:i + size] for i in range(0, len(items), size)]


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need two sequences of equal length >= 2")

    def ranks(v: list[float]) -> np.ndarray:
        order = sorted(range(len(v)), key=lambda i: v[i])
        out = np.zeros(len(v))
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
                j += 1
            avg = (i + j) / 2.0 + 1.0
            for k in range(i, j + 1):
                out[order[k]] = avg
            i = j + 1
        return out

    rx, ry = ranks(list(xs)), ranks(list(ys))
    sx, sy = rx - rx.mean(), ry - ry.mean()
    denom = float(np.sqrt((sx ** 2).sum() * (sy ** 2).sum()))
    if denom == 0.0:
        return 0.0
    return float((sx * sy).sum() / denom)
