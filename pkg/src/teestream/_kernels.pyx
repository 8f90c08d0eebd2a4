# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: stable radix sort, k-way run merge, sort-merge join, varint."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t, int32_t, uint8_t

cnp.import_array()

cdef enum:
    INSERTION_RUN = 24


cdef inline void _merge(const uint64_t* ka, const int64_t* pa,
                        uint64_t* kb, int64_t* pb,
                        Py_ssize_t lo, Py_ssize_t mid, Py_ssize_t hi) nogil:
    cdef Py_ssize_t i = lo, j = mid, o = lo
    while i < mid and j < hi:
        # <= keeps the left element first on ties (stability)
        if ka[i] <= ka[j]:
            kb[o] = ka[i]; pb[o] = pa[i]; i += 1
        else:
            kb[o] = ka[j]; pb[o] = pa[j]; j += 1
        o += 1
    while i < mid:
        kb[o] = ka[i]; pb[o] = pa[i]; i += 1; o += 1
    while j < hi:
        kb[o] = ka[j]; pb[o] = pa[j]; j += 1; o += 1


cdef void _merge_passes(uint64_t* k0, int64_t* p0, uint64_t* k1, int64_t* p1,
                        Py_ssize_t* bounds, Py_ssize_t nruns, Py_ssize_t n,
                        int* result_in_second) nogil:
    """Repeatedly merge adjacent runs (left first) until one run remains."""
    cdef uint64_t* ks = k0
    cdef int64_t* ps = p0
    cdef uint64_t* kd = k1
    cdef int64_t* pd = p1
    cdef uint64_t* kt
    cdef int64_t* pt
    cdef Py_ssize_t r, w
    cdef int flipped = 0
    while nruns > 1:
        w = 0
        r = 0
        while r < nruns:
            if r + 1 < nruns:
                _merge(ks, ps, kd, pd, bounds[r], bounds[r + 1], bounds[r + 2])
                bounds[w] = bounds[r]
                r += 2
            else:
                # odd run out: copy through
                _merge(ks, ps, kd, pd, bounds[r], bounds[r + 1], bounds[r + 1])
                bounds[w] = bounds[r]
                r += 1
            w += 1
        bounds[w] = n
        nruns = w
        kt = ks; ks = kd; kd = kt
        pt = ps; ps = pd; pd = pt
        flipped = 1 - flipped
    result_in_second[0] = flipped


def sort_perm(const uint64_t[::1] keys):
    """Stable permutation sorting ``keys`` ascending.

    LSD radix sort over 8-bit digits; digits on which every key agrees are
    skipped, so bounded composite keys take few passes. Short inputs use
    insertion sort.
    """
    cdef Py_ssize_t n = keys.shape[0]
    cdef Py_ssize_t i, j, d, c
    cdef uint64_t kv
    cdef int64_t pv
    cdef unsigned int shift
    cdef int flipped = 0
    perm_a = np.arange(n, dtype=np.int64)
    if n < 2:
        return perm_a
    keys_a = np.array(keys, dtype=np.uint64, copy=True)
    cdef uint64_t[::1] ka = keys_a
    cdef int64_t[::1] pa = perm_a
    if n <= INSERTION_RUN * 4:
        with nogil:
            for i in range(1, n):
                kv = ka[i]; pv = pa[i]
                j = i - 1
                while j >= 0 and ka[j] > kv:
                    ka[j + 1] = ka[j]; pa[j + 1] = pa[j]
                    j -= 1
                ka[j + 1] = kv; pa[j + 1] = pv
        return perm_a
    keys_b = np.empty(n, dtype=np.uint64)
    perm_b = np.empty(n, dtype=np.int64)
    cdef uint64_t[::1] kb = keys_b
    cdef int64_t[::1] pb = perm_b
    hist_arr = np.zeros((8, 256), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] hist = hist_arr
    cdef Py_ssize_t total, tmp
    cdef uint64_t* ks
    cdef uint64_t* kd
    cdef int64_t* ps
    cdef int64_t* pd
    with nogil:
        for i in range(n):
            kv = ka[i]
            for d in range(8):
                hist[d, (kv >> (8 * d)) & 0xFF] += 1
        ks = &ka[0]; kd = &kb[0]; ps = &pa[0]; pd = &pb[0]
        for d in range(8):
            shift = 8 * d
            if hist[d, (ks[0] >> shift) & 0xFF] == n:
                continue
            total = 0
            for c in range(256):
                tmp = hist[d, c]
                hist[d, c] = total
                total += tmp
            for i in range(n):
                kv = ks[i]
                c = (kv >> shift) & 0xFF
                j = hist[d, c]
                hist[d, c] = j + 1
                kd[j] = kv
                pd[j] = ps[i]
            ks, kd = kd, ks
            ps, pd = pd, ps
            flipped = 1 - flipped
    return perm_b if flipped else perm_a


def merge_perm(const uint64_t[::1] keys, const int64_t[::1] offsets):
    """Stable k-way merge of the sorted runs ``keys[offsets[i]:offsets[i+1]]``."""
    cdef Py_ssize_t n = keys.shape[0]
    cdef Py_ssize_t nruns = offsets.shape[0] - 1
    cdef Py_ssize_t i
    cdef int flipped = 0
    perm_a = np.arange(n, dtype=np.int64)
    if nruns < 2 or n < 2:
        return perm_a
    keys_a = np.array(keys, dtype=np.uint64, copy=True)
    keys_b = np.empty(n, dtype=np.uint64)
    perm_b = np.empty(n, dtype=np.int64)
    cdef uint64_t[::1] ka = keys_a
    cdef uint64_t[::1] kb = keys_b
    cdef int64_t[::1] pa = perm_a
    cdef int64_t[::1] pb = perm_b
    bounds_arr = np.empty(nruns + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] bounds = bounds_arr
    for i in range(nruns + 1):
        bounds[i] = offsets[i]
    with nogil:
        _merge_passes(&ka[0], &pa[0], &kb[0], &pb[0], &bounds[0], nruns, n, &flipped)
    return perm_b if flipped else perm_a


def join_pairs(const int32_t[::1] left, const int32_t[::1] right):
    """Index pairs (li, ri) with equal keys, ordered by key, left index, right index."""
    cdef Py_ssize_t nl = left.shape[0], nr = right.shape[0]
    lperm = np.asarray(sort_perm((np.asarray(left, dtype=np.int64) + 2147483648).astype(np.uint64)))
    rperm = np.asarray(sort_perm((np.asarray(right, dtype=np.int64) + 2147483648).astype(np.uint64)))
    cdef int64_t[::1] lp = lperm
    cdef int64_t[::1] rp = rperm
    cdef Py_ssize_t i = 0, j = 0, i2, j2, a, b, total = 0, o
    cdef int32_t kl, kr
    # first pass counts output size
    while i < nl and j < nr:
        kl = left[lp[i]]; kr = right[rp[j]]
        if kl < kr:
            i += 1
        elif kl > kr:
            j += 1
        else:
            i2 = i
            while i2 < nl and left[lp[i2]] == kl:
                i2 += 1
            j2 = j
            while j2 < nr and right[rp[j2]] == kl:
                j2 += 1
            total += (i2 - i) * (j2 - j)
            i = i2; j = j2
    li_arr = np.empty(total, dtype=np.int64)
    ri_arr = np.empty(total, dtype=np.int64)
    cdef int64_t[::1] lo_ = li_arr
    cdef int64_t[::1] ro_ = ri_arr
    i = 0; j = 0; o = 0
    while i < nl and j < nr:
        kl = left[lp[i]]; kr = right[rp[j]]
        if kl < kr:
            i += 1
        elif kl > kr:
            j += 1
        else:
            i2 = i
            while i2 < nl and left[lp[i2]] == kl:
                i2 += 1
            j2 = j
            while j2 < nr and right[rp[j2]] == kl:
                j2 += 1
            for a in range(i, i2):
                for b in range(j, j2):
                    lo_[o] = lp[a]; ro_[o] = rp[b]; o += 1
            i = i2; j = j2
    return li_arr, ri_arr


def varint_encode(const uint64_t[::1] values):
    """LEB128 encoding of unsigned 64-bit values, concatenated."""
    cdef Py_ssize_t n = values.shape[0], i, o = 0
    cdef uint64_t v
    out = np.empty(n * 10, dtype=np.uint8)
    cdef uint8_t[::1] buf = out
    for i in range(n):
        v = values[i]
        while v >= 0x80:
            buf[o] = <uint8_t>((v & 0x7F) | 0x80)
            v >>= 7
            o += 1
        buf[o] = <uint8_t>v
        o += 1
    return out[:o].tobytes()


def varint_decode(const uint8_t[::1] data, Py_ssize_t count, Py_ssize_t pos=0):
    """Decode ``count`` varints from ``data`` at ``pos``; returns (values, end_pos).

    Raises ValueError when the buffer ends mid-value or a value overflows 64 bits.
    """
    cdef Py_ssize_t n = data.shape[0], i
    cdef uint64_t v
    cdef unsigned int shift
    cdef uint8_t b
    out = np.empty(count, dtype=np.uint64)
    cdef uint64_t[::1] res = out
    for i in range(count):
        v = 0
        shift = 0
        while True:
            if pos >= n:
                raise ValueError("truncated varint")
            if shift > 63:
                raise ValueError("varint overflow")
            b = data[pos]
            pos += 1
            v |= (<uint64_t>(b & 0x7F)) << shift
            if b < 0x80:
                break
            shift += 7
        res[i] = v
    return out, pos
