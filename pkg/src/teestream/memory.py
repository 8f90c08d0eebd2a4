"""Secure-memory allocator: uArrays placed in uGroups, reclaimed from the front.

A uGroup is a logically contiguous byte range (``reserved`` bytes, 1 GiB by
default) backed on demand by fixed-size chunks (2 MiB). uArrays are appended
at the group's tail and never move; an item never straddles a chunk, so each
array is a short list of (chunk, offset, items) segments. Reclamation walks
the Retired prefix of each group and releases chunks lying wholly behind it.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import Backpressure, LifecycleViolation, ParamInvalid

CHUNK_SIZE = 2 * 1024 * 1024
GROUP_RESERVED = 1024 * 1024 * 1024


class ArrayKind(enum.Enum):
    STREAMING = "streaming"
    STATE = "state"
    TEMPORARY = "temporary"


class ArrayState(enum.Enum):
    OPEN = "open"
    PRODUCED = "produced"
    RETIRED = "retired"


@dataclass(frozen=True)
class After:
    """Hint: ``second`` will be consumed after ``first``.

    At the gate ``first`` is an opaque reference and ``second`` is left None,
    meaning "this call's output". Inside the allocator both are audit ids.
    """

    first: int
    second: int | None = None


@dataclass(frozen=True)
class Parallel:
    """Hint: ``k`` workers will consume this call's outputs concurrently."""

    k: int
    refs: tuple = ()


ConsumptionHint = After | Parallel


@dataclass(eq=False)
class UArray:
    id: int
    kind: ArrayKind
    item_size: int
    group: "UGroup"
    start_offset: int
    dtype: np.dtype | None = None
    state: ArrayState = ArrayState.OPEN
    length: int = 0
    segments: list = field(default_factory=list)  # [chunk_index, byte_offset, items]
    end_offset: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def nbytes(self) -> int:
        return self.length * self.item_size


@dataclass(eq=False)
class UGroup:
    id: int
    reserved: int
    chunks: dict = field(default_factory=dict)  # chunk index -> buffer
    members: list = field(default_factory=list)
    reclaim_cursor: int = 0
    tail: int = 0

    @property
    def last(self) -> UArray | None:
        return self.members[-1] if self.members else None


@dataclass
class MemoryStats:
    resident_bytes: int
    reserved_bytes: int
    live_groups: int
    live_arrays: int
    reclaimed_bytes: int
    peak_resident_bytes: int = 0


class Allocator:
    """uArray/uGroup allocator.

    ``policy`` selects placement: ``"hints"`` follows consumption hints,
    ``"fresh"`` ignores them (one group per array) and ``"generation"``
    co-locates every output of the same primitive in a shared group.
    """

    def __init__(self, chunk_size: int = CHUNK_SIZE, reserved: int = GROUP_RESERVED,
                 capacity: int | None = None, policy: str = "hints"):
        if policy not in ("hints", "fresh", "generation"):
            raise ParamInvalid(f"unknown placement policy {policy!r}")
        self.chunk_size = chunk_size
        self.reserved = reserved
        self.capacity = capacity
        self.policy = policy
        self._lock = threading.RLock()
        self._ids = itertools.count(1)
        self._group_ids = itertools.count(1)
        self._arrays: dict[int, UArray] = {}
        self._groups: dict[int, UGroup] = {}
        self._after: dict[int, int] = {}
        self._generation: dict = {}
        self._resident = 0
        self._peak = 0
        self._reclaimed = 0

    # -- placement ---------------------------------------------------------

    def _new_group(self) -> UGroup:
        g = UGroup(next(self._group_ids), self.reserved)
        self._groups[g.id] = g
        return g

    def _chain_target(self, first: int) -> UGroup | None:
        seen = set()
        cur = first
        while cur is not None and cur not in seen:
            seen.add(cur)
            ua = self._arrays.get(cur)
            if ua is not None and ua.state is ArrayState.PRODUCED and ua.group.last is ua:
                # offsets never move back, so a group past half its range is left to drain
                if ua.group.tail <= ua.group.reserved // 2:
                    return ua.group
                return None
            cur = self._after.get(cur)
        return None

    def create(self, kind: ArrayKind, item_size: int, hints=(), dtype=None,
               generation=None) -> UArray:
        if item_size <= 0 or item_size > self.chunk_size:
            raise ParamInvalid(f"item size {item_size} out of range")
        with self._lock:
            new_id = next(self._ids)
            group = None
            if self.policy == "hints":
                parallel = any(isinstance(h, Parallel) and h.k >= 2 for h in hints)
                for h in hints:
                    if isinstance(h, After):
                        self._after[new_id] = h.first
                        if not parallel and group is None:
                            group = self._chain_target(h.first)
            elif self.policy == "generation" and generation is not None:
                g = self._generation.get(generation)
                if g is not None and g.id in self._groups and (
                        g.last is None or g.last.state is not ArrayState.OPEN):
                    group = g
            if group is None:
                group = self._new_group()
                if self.policy == "generation" and generation is not None:
                    self._generation[generation] = group
            ua = UArray(new_id, kind, item_size, group, group.tail, dtype=dtype)
            ua.end_offset = group.tail
            group.members.append(ua)
            self._arrays[new_id] = ua
            return ua

    # -- growth ------------------------------------------------------------

    def _chunk(self, group: UGroup, index: int) -> np.ndarray:
        buf = group.chunks.get(index)
        if buf is None:
            if (index + 1) * self.chunk_size > group.reserved:
                raise Backpressure(f"group {group.id} exhausted its reservation")
            if self.capacity is not None and self._resident + self.chunk_size > self.capacity:
                raise Backpressure("secure memory capacity exhausted")
            buf = np.empty(self.chunk_size, dtype=np.uint8)
            group.chunks[index] = buf
            self._resident += self.chunk_size
            self._peak = max(self._peak, self._resident)
        return buf

    def append(self, ua: UArray, items) -> int:
        data = np.ascontiguousarray(items).view(np.uint8).reshape(-1)
        if len(data) % ua.item_size:
            raise ParamInvalid("payload is not a whole number of items")
        with self._lock:
            if ua.state is not ArrayState.OPEN:
                raise LifecycleViolation(f"append to {ua.state.value} uArray {ua.id}")
            group = ua.group
            off = group.tail
            n = len(data) // ua.item_size
            done = 0
            cs = self.chunk_size
            while done < n:
                index, within = divmod(off, cs)
                room = (cs - within) // ua.item_size
                if room == 0:
                    off = (index + 1) * cs
                    continue
                take = min(room, n - done)
                buf = self._chunk(group, index)
                nb = take * ua.item_size
                buf[within:within + nb] = data[done * ua.item_size:done * ua.item_size + nb]
                segs = ua.segments
                if segs and segs[-1][0] == index and segs[-1][1] + segs[-1][2] * ua.item_size == within:
                    segs[-1][2] += take
                else:
                    segs.append([index, within, take])
                done += take
                off += nb
            group.tail = off
            ua.end_offset = off
            ua.length += n
            return ua.length

    def seal(self, ua: UArray) -> None:
        with self._lock:
            if ua.state is not ArrayState.OPEN:
                raise LifecycleViolation(f"seal of {ua.state.value} uArray {ua.id}")
            ua.state = ArrayState.PRODUCED

    def retire(self, ua: UArray, reclaim: bool = True) -> None:
        with self._lock:
            if ua.state is not ArrayState.PRODUCED:
                raise LifecycleViolation(f"retire of {ua.state.value} uArray {ua.id}")
            ua.state = ArrayState.RETIRED
            if reclaim:
                self._reclaim_group(ua.group)

    # -- reclamation -------------------------------------------------------

    def _reclaim_group(self, group: UGroup) -> int:
        freed = 0
        members = group.members
        i = 0
        while i < len(members) and members[i].state is ArrayState.RETIRED:
            i += 1
        if i == 0:
            return 0
        for ua in members[:i]:
            del self._arrays[ua.id]
            self._after.pop(ua.id, None)
        del members[:i]
        if not members:
            freed = len(group.chunks) * self.chunk_size
            group.chunks.clear()
            group.reclaim_cursor = group.tail
            del self._groups[group.id]
        else:
            group.reclaim_cursor = members[0].start_offset
            limit = group.reclaim_cursor // self.chunk_size
            for index in [c for c in group.chunks if c < limit]:
                del group.chunks[index]
                freed += self.chunk_size
        self._resident -= freed
        self._reclaimed += freed
        return freed

    def reclaim(self) -> int:
        with self._lock:
            return sum(self._reclaim_group(g) for g in list(self._groups.values()))

    # -- access ------------------------------------------------------------

    def read(self, ua: UArray) -> np.ndarray:
        """Content of a uArray as a read-only array (zero-copy for single-segment arrays)."""
        if ua.state is ArrayState.RETIRED:
            raise LifecycleViolation(f"read of retired uArray {ua.id}")
        dtype = ua.dtype if ua.dtype is not None else np.dtype(("V", ua.item_size))
        parts = []
        for index, within, items in ua.segments:
            buf = ua.group.chunks[index]
            parts.append(buf[within:within + items * ua.item_size].view(dtype))
        if not parts:
            return np.zeros(0, dtype=dtype)
        out = parts[0] if len(parts) == 1 else np.concatenate(parts)
        out.flags.writeable = False
        return out

    def raw_bytes(self, ua: UArray) -> bytes:
        return self.read(ua).tobytes()

    def content_hash(self, ua: UArray) -> str:
        return hashlib.sha256(self.raw_bytes(ua)).hexdigest()

    def get(self, array_id: int) -> UArray | None:
        return self._arrays.get(array_id)

    def groups(self) -> list[UGroup]:
        with self._lock:
            return list(self._groups.values())

    def stats(self) -> MemoryStats:
        with self._lock:
            return MemoryStats(
                resident_bytes=self._resident,
                reserved_bytes=len(self._groups) * self.reserved,
                live_groups=len(self._groups),
                live_arrays=len(self._arrays),
                reclaimed_bytes=self._reclaimed,
                peak_resident_bytes=self._peak,
            )
