"""Trusted primitives: stateless, single-threaded functions over contiguous arrays.

Every primitive takes and returns numpy structured arrays and never touches
shared state, so the gate may run any number of them concurrently. Orders are
fixed so that outputs are bit-identical across runs: events sort by
(key, event_time, input position), and ties elsewhere fall back to input order.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import EmptyInput, ParamInvalid
from .model import AGG_DTYPE, JOIN_DTYPE, KEY_DTYPE, RANK_DTYPE, sort_keys


def prim_sort(events: np.ndarray) -> np.ndarray:
    if len(events) < 2:
        return events.copy()
    perm = kernels.sort_perm(sort_keys(events))
    return events[perm]


def _is_sorted(keys: np.ndarray) -> bool:
    return len(keys) < 2 or bool(np.all(keys[1:] >= keys[:-1]))


def prim_merge(runs: list[np.ndarray]) -> np.ndarray:
    """Stable N-way merge; equal items keep run order."""
    runs = [r for r in runs]
    if not runs:
        raise ParamInvalid("merge needs at least one input")
    dtype = runs[0].dtype
    if any(r.dtype != dtype for r in runs):
        raise ParamInvalid("merge inputs have different item types")
    keyed = [sort_keys(r) for r in runs]
    for i, k in enumerate(keyed):
        if not _is_sorted(k):
            raise ParamInvalid(f"merge input {i} is not sorted")
    nonempty = [i for i, r in enumerate(runs) if len(r)]
    if len(nonempty) <= 1:
        return runs[nonempty[0]].copy() if nonempty else runs[0][:0].copy()
    data = np.concatenate([runs[i] for i in nonempty])
    keys = np.concatenate([keyed[i] for i in nonempty])
    offsets = np.zeros(len(nonempty) + 1, dtype=np.int64)
    np.cumsum([len(runs[i]) for i in nonempty], out=offsets[1:])
    return data[kernels.merge_perm(keys, offsets)]


def prim_segment(events: np.ndarray, width: int, late_before: int | None = None
                 ) -> tuple[list[tuple[int, np.ndarray]], int]:
    """Split by window index; drops events older than ``late_before``.

    Returns ``([(window, events), ...] in window order, dropped_count)``. Within
    a window the input order is kept.
    """
    if width <= 0:
        raise ParamInvalid(f"window width must be positive, got {width}")
    dropped = 0
    if late_before is not None and len(events):
        keep = events["t"].astype(np.int64) >= late_before
        dropped = int(len(events) - keep.sum())
        if dropped:
            events = events[keep]
    if not len(events):
        return [], dropped
    win = events["t"].astype(np.int64) // width
    if win[0] == win[-1] and np.all(win == win[0]):
        return [(int(win[0]), events.copy())], dropped
    order = np.argsort(win, kind="stable")
    win_sorted = win[order]
    cuts = np.flatnonzero(np.diff(win_sorted)) + 1
    starts = np.concatenate(([0], cuts))
    ends = np.concatenate((cuts, [len(win_sorted)]))
    out = []
    for s, e in zip(starts, ends):
        out.append((int(win_sorted[s]), events[order[s:e]]))
    return out, dropped


def prim_join(left: np.ndarray, right: np.ndarray, width: int | None = None,
              window: int | None = None) -> np.ndarray:
    if window is not None and width is not None:
        for side, arr in (("left", left), ("right", right)):
            if len(arr) and not np.all(arr["t"].astype(np.int64) // width == window):
                raise ParamInvalid(f"{side} input has events outside window {window}")
    li, ri = kernels.join_pairs(np.ascontiguousarray(left["key"]),
                                np.ascontiguousarray(right["key"]))
    out = np.empty(len(li), dtype=JOIN_DTYPE)
    out["key"] = left["key"][li]
    out["vleft"] = left["value"][li]
    out["vright"] = right["value"][ri]
    return out


def _group_bounds(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cuts = np.flatnonzero(keys[1:] != keys[:-1]) + 1
    starts = np.concatenate(([0], cuts))
    ends = np.concatenate((cuts, [len(keys)]))
    return starts, ends


def prim_aggregate(events: np.ndarray, kind: str, group_by_key: bool) -> np.ndarray:
    """Per-key (input must be key-sorted) or global aggregation.

    Sums and counts are exact 64-bit integers, averages are float64 and the
    median is the lower median.
    """
    if kind not in ("sum", "count", "avg", "median", "sumcnt"):
        raise ParamInvalid(f"unknown aggregation kind {kind!r}")
    n = len(events)
    values = events["value"].astype(np.int64)
    has_extra = "extra" in events.dtype.names
    if not group_by_key:
        if n == 0 and kind in ("avg", "median"):
            raise EmptyInput(f"global {kind} of an empty input")
        out = np.zeros(1, dtype=AGG_DTYPE)
        out["count"] = n
        out["sum"] = int(values.sum())
        if kind == "avg":
            out["avg"] = out["sum"][0] / n
        elif kind == "median":
            out["median"] = np.sort(values)[(n - 1) // 2]
        return out
    if n == 0:
        return np.zeros(0, dtype=AGG_DTYPE)
    keys = events["key"]
    if not _is_sorted(keys):
        raise ParamInvalid("grouped aggregation needs key-sorted input")
    starts, ends = _group_bounds(keys)
    counts = ends - starts
    out = np.zeros(len(starts), dtype=AGG_DTYPE)
    out["key"] = keys[starts]
    if has_extra:
        out["extra"] = events["extra"][starts]
    out["count"] = counts
    out["sum"] = np.add.reduceat(values, starts)
    if kind == "avg":
        out["avg"] = out["sum"] / counts
    elif kind == "median":
        order = np.lexsort((values, np.repeat(np.arange(len(starts)), counts)))
        out["median"] = values[order][starts + (counts - 1) // 2]
    return out


def prim_topk(events: np.ndarray, k: int) -> np.ndarray:
    """Per key, the ``k`` largest values; ties go to the earlier event time."""
    if k < 1:
        raise ParamInvalid(f"k must be >= 1, got {k}")
    n = len(events)
    if n == 0:
        return events.copy()
    keys = events["key"]
    if not _is_sorted(keys):
        raise ParamInvalid("top-k needs key-sorted input")
    neg = -events["value"].astype(np.int64)
    order = np.lexsort((np.arange(n), events["t"], neg, keys))
    ranked = events[order]
    starts, ends = _group_bounds(ranked["key"])
    rank = np.arange(n) - np.repeat(starts, ends - starts)
    return ranked[rank < k]


def prim_unique(events: np.ndarray) -> tuple[np.ndarray, int]:
    n = len(events)
    if n == 0:
        return np.zeros(0, dtype=KEY_DTYPE), 0
    keys = events["key"]
    if not _is_sorted(keys):
        raise ParamInvalid("distinct needs key-sorted input")
    starts, _ = _group_bounds(keys)
    out = np.zeros(len(starts), dtype=KEY_DTYPE)
    out["key"] = keys[starts]
    return out, len(starts)


def prim_filter_band(events: np.ndarray, lo: int, hi: int) -> np.ndarray:
    if lo > hi:
        raise ParamInvalid(f"empty band: lo={lo} > hi={hi}")
    v = events["value"]
    return events[(v >= lo) & (v <= hi)]


def prim_concat(arrays: list[np.ndarray]) -> np.ndarray:
    if not arrays:
        raise ParamInvalid("concat needs at least one input")
    dtype = arrays[0].dtype
    if any(a.dtype != dtype for a in arrays):
        raise ParamInvalid("concat inputs have different item types")
    return np.concatenate(arrays) if len(arrays) > 1 else arrays[0].copy()


def prim_rank(per_plug: np.ndarray) -> np.ndarray:
    """Houses owning the most plugs whose average load exceeds the mean plug load.

    Input is per-plug aggregation output (``key`` = plug, ``extra`` = house,
    ``avg`` = plug load). Output lists every tied house in ascending order.
    """
    if len(per_plug) == 0:
        return np.zeros(0, dtype=RANK_DTYPE)
    mean = float(per_plug["avg"].mean())
    high = per_plug["extra"][per_plug["avg"] > mean]
    houses = np.unique(per_plug["extra"])
    counts = np.zeros(len(houses), dtype=np.int64)
    if len(high):
        idx = np.searchsorted(houses, high)
        np.add.at(counts, idx, 1)
    best = counts.max()
    sel = counts == best
    out = np.zeros(int(sel.sum()), dtype=RANK_DTYPE)
    out["house"] = houses[sel]
    out["plugs"] = best
    return out
