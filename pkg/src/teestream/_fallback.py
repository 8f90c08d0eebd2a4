"""Numpy implementations of the compiled kernels, used when the extension is absent.

Signatures and results match ``_kernels`` exactly; the benchmark in
``benchmarks/bench_kernels.py`` times both.
"""

from __future__ import annotations

import numpy as np


def sort_perm(keys: np.ndarray) -> np.ndarray:
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    return np.argsort(keys, kind="stable").astype(np.int64, copy=False)


def merge_perm(keys: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    # a stable sort of the concatenation keeps earlier runs first on ties,
    # which is exactly the tie rule of a left-first pairwise merge
    return sort_perm(keys)


def join_pairs(left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    left = np.asarray(left, dtype=np.int32)
    right = np.asarray(right, dtype=np.int32)
    lperm = np.argsort(left, kind="stable")
    rperm = np.argsort(right, kind="stable")
    lsorted = left[lperm]
    rsorted = right[rperm]
    lo = np.searchsorted(rsorted, lsorted, side="left")
    hi = np.searchsorted(rsorted, lsorted, side="right")
    reps = hi - lo
    total = int(reps.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    li = np.repeat(lperm.astype(np.int64), reps)
    # position inside each left element's block of right matches
    starts = np.repeat(lo, reps)
    block_first = np.repeat(np.cumsum(reps) - reps, reps)
    ri = rperm.astype(np.int64)[starts + (np.arange(total) - block_first)]
    return li, ri


def varint_encode(values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype=np.uint64)
    if values.size == 0:
        return b""
    nbytes = np.ones(values.size, dtype=np.int64)
    v = values >> np.uint64(7)
    while v.any():
        nbytes += v > 0
        v = v >> np.uint64(7)
    ends = np.cumsum(nbytes)
    out = np.empty(int(ends[-1]), dtype=np.uint8)
    starts = ends - nbytes
    for k in range(int(nbytes.max())):
        active = nbytes > k
        idx = starts[active] + k
        chunk = (values[active] >> np.uint64(7 * k)) & np.uint64(0x7F)
        more = (nbytes[active] > k + 1).astype(np.uint64) << np.uint64(7)
        out[idx] = (chunk | more).astype(np.uint8)
    return out.tobytes()


def varint_decode(data, count: int, pos: int = 0) -> tuple[np.ndarray, int]:
    buf = memoryview(data).cast("B")
    n = len(buf)
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        value = 0
        shift = 0
        while True:
            if pos >= n:
                raise ValueError("truncated varint")
            if shift > 63:
                raise ValueError("varint overflow")
            b = buf[pos]
            pos += 1
            value |= (b & 0x7F) << shift
            if b < 0x80:
                break
            shift += 7
        if value >> 64:
            raise ValueError("varint overflow")
        out[i] = value
    return out, pos
