"""The data plane behind the gate: opaque references, primitives over uArrays, audit.

Four entry points cross the boundary: :meth:`DataPlane.init`,
:meth:`DataPlane.finalize`, :meth:`DataPlane.debug_dump` and
:meth:`DataPlane.invoke`. Requests name data only by opaque 64-bit tokens and
responses carry only tokens, window tags and scalars. The one exception is
EGRESS, whose response holds the result frame (encrypted unless the variant
is insecure) for the untrusted side to forward.

Ownership: a streaming input (ingest batch, window chunk, intermediate
result) is consumed by the call that names it, and its token dies then.
Watermark arrays are shared by every close of the windows they complete and
live until the caller lists them in ``release``.
"""

from __future__ import annotations

import pickle
import secrets
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import primitives as P
from .audit import AuditLog, AuditRecord, RecordKind, hint_digest
from .codec import BlockCodec
from .errors import (
    LifecycleViolation,
    ParamInvalid,
    RefInvalid,
    RejectedInput,
    TeeError,
)
from .iogateway import (
    DEFAULT_EGRESS_KEY,
    DEFAULT_INGRESS_KEY,
    FrameKind,
    IngestPath,
    frame_plaintext,
    parse_frame,
    result_frame,
)
from .memory import After, Allocator, ArrayKind, ArrayState, Parallel, UArray
from .model import (
    AGG_DTYPE,
    AGG_KINDS,
    JOIN_DTYPE,
    KEY_DTYPE,
    RANK_DTYPE,
    WATERMARK_DTYPE,
    PrimitiveId,
    event_dtype,
)

AGG_BY_PRIM = {v: k for k, v in AGG_KINDS.items()}
CLOSE_PRIMS = {
    PrimitiveId.MERGE, PrimitiveId.CONCAT, PrimitiveId.JOIN, PrimitiveId.TOPK,
    PrimitiveId.UNIQUE, PrimitiveId.RANK, *AGG_BY_PRIM,
}
STREAM_PRIMS = {PrimitiveId.SORT, PrimitiveId.FILTER_BAND}


# ---------------------------------------------------------------------------
# opaque references

@dataclass
class RefEntry:
    array: UArray
    owner: str = "control"

    @property
    def audit_id(self) -> int:
        return self.array.id


class RefTable:
    """Live tokens only. Tokens are never reissued within a run, even after retirement.

    ``draw`` is the token source; tests substitute a scripted one to force collisions.
    """

    def __init__(self, draw: Callable[[], int] | None = None):
        self._draw = draw or (lambda: secrets.randbits(64))
        self._live: dict[int, RefEntry] = {}
        self._used: set[int] = set()
        self._lock = threading.Lock()
        self.collisions = 0

    def issue(self, array: UArray, owner: str = "control") -> int:
        with self._lock:
            while True:
                token = self._draw() & 0xFFFF_FFFF_FFFF_FFFF
                if token and token not in self._used:
                    break
                self.collisions += 1
            self._used.add(token)
            self._live[token] = RefEntry(array, owner)
            return token

    def lookup(self, token: int) -> RefEntry:
        entry = self._live.get(token)
        if entry is None:
            raise RefInvalid(f"unknown opaque reference 0x{token:x}")
        return entry

    def take(self, tokens) -> list[RefEntry]:
        """Atomically remove ``tokens`` (ownership moves into the gate)."""
        with self._lock:
            missing = [t for t in tokens if t not in self._live]
            if missing:
                raise RefInvalid(f"unknown opaque reference 0x{missing[0]:x}")
            if len(set(tokens)) != len(tokens):
                raise ParamInvalid("the same reference is consumed twice")
            return [self._live.pop(t) for t in tokens]

    def restore(self, tokens, entries) -> None:
        with self._lock:
            for t, e in zip(tokens, entries):
                self._live[t] = e

    def retire(self, token: int) -> RefEntry:
        with self._lock:
            entry = self._live.pop(token, None)
        if entry is None:
            raise RefInvalid(f"unknown opaque reference 0x{token:x}")
        return entry

    def __contains__(self, token: int) -> bool:
        return token in self._live

    def __len__(self) -> int:
        return len(self._live)


# ---------------------------------------------------------------------------
# requests and responses

@dataclass
class GateRequest:
    primitive: PrimitiveId
    inputs: tuple = ()
    params: dict = field(default_factory=dict)
    hints: tuple = ()
    release: tuple = ()
    payload: bytes | memoryview | None = None


@dataclass
class GateResponse:
    outputs: tuple = ()
    tags: tuple = ()
    ts: int = 0
    info: dict = field(default_factory=dict)


@dataclass
class GateConfig:
    """Data-plane settings fixed at ``init``.

    ``secure=False`` is the insecure baseline: no token validation beyond
    lookup, no audit records, no cryptography; the call structure is kept.
    """

    fields: tuple = (3,)
    batch_size: int = 100_000
    secure: bool = True
    ingress_key: bytes | None = DEFAULT_INGRESS_KEY
    egress_key: bytes | None = DEFAULT_EGRESS_KEY
    ingest_path: IngestPath = IngestPath.TRUSTED_DIRECT
    strict_gate: bool = False
    placement: str = "hints"
    chunk_size: int | None = None
    capacity: int | None = None
    codec: BlockCodec = field(default_factory=BlockCodec)
    audit_sink: Callable[[bytes], None] | None = None
    keep_records: bool = False
    clock: Callable[[], int] | None = None
    draw: Callable[[], int] | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParamInvalid("batch_size must be >= 1")
        for f in self.fields:
            event_dtype(f)


@dataclass
class _Port:
    fields: int
    dtype: np.dtype
    open_batch: UArray | None = None
    next_hint: int | None = None
    seq: int = 0


class DataPlane:
    """Simulated TEE data plane. Create, then call :meth:`init` before anything else."""

    def __init__(self):
        self._ready = False

    # -- entry 1 -----------------------------------------------------------

    def init(self, config: GateConfig) -> None:
        if self._ready:
            raise LifecycleViolation("data plane already initialised")
        self.cfg = config
        kw = {"policy": config.placement, "capacity": config.capacity}
        if config.chunk_size:
            kw["chunk_size"] = config.chunk_size
        self.alloc = Allocator(**kw)
        self.refs = RefTable(config.draw)
        t0 = time.perf_counter_ns()
        self._clock = config.clock or (lambda: (time.perf_counter_ns() - t0) // 1000)
        self.audit = AuditLog(config.codec.encode, config.audit_sink, keep_records=config.keep_records)
        self._ports = [_Port(f, event_dtype(f)) for f in config.fields]
        self._ingest_lock = threading.Lock()
        self._egress_lock = threading.Lock()
        self._counter_lock = threading.Lock()
        self._wm_value: int | None = None
        self._batch_seq = 0
        self.counters = dict(
            invocations=0, rejected=0, ingested_events=0, ingested_bytes=0,
            bytes_copied=0, dropped_events=0, egressed=0, audit_ns=0,
        )
        self._ready = True

    # -- entry 2 -----------------------------------------------------------

    def finalize(self) -> dict:
        """Seal pending batches, flush the audit buffer and return the final counters."""
        self._require()
        out = {}
        with self._ingest_lock:
            sealed = self._seal_all(self._clock())
        if sealed:
            out["late_batches"] = len(sealed)
        self.audit.flush_block(self._clock(), force=True)
        out.update(self.debug_dump())
        self._ready = False
        return out

    # -- entry 3 -----------------------------------------------------------

    def debug_dump(self) -> dict:
        self._require()
        s = self.alloc.stats()
        return dict(
            self.counters,
            resident_bytes=s.resident_bytes,
            reserved_bytes=s.reserved_bytes,
            live_groups=s.live_groups,
            live_arrays=s.live_arrays,
            reclaimed_bytes=s.reclaimed_bytes,
            peak_resident_bytes=s.peak_resident_bytes,
            live_refs=len(self.refs),
            ref_collisions=self.refs.collisions,
            audit_records=self.audit.appended,
            audit_blocks=self.audit.blocks,
            audit_raw_bytes=self.audit.raw_bytes,
            audit_block_bytes=self.audit.block_bytes,
            audit_encode_ns=self.audit.encode_ns,
        )

    # -- entry 4 -----------------------------------------------------------

    def invoke(self, req: GateRequest) -> GateResponse:
        self._require()
        if self.cfg.strict_gate:
            req = pickle.loads(pickle.dumps(req))
        self._count("invocations")
        try:
            resp = self._dispatch(req)
        except TeeError:
            self._count("rejected")
            if self.cfg.secure:
                self._record(AuditRecord(self._clock(), RecordKind.REJECT, req.primitive))
            raise
        if req.release:
            self._release(req.release)
        if self.cfg.strict_gate:
            resp = pickle.loads(pickle.dumps(resp))
        return resp

    # -----------------------------------------------------------------------

    def _require(self):
        if not self._ready:
            raise LifecycleViolation("data plane is not initialised")

    def _count(self, name: str, n: int = 1) -> None:
        with self._counter_lock:
            self.counters[name] += n

    def _record(self, r: AuditRecord) -> None:
        t0 = time.perf_counter_ns()
        self.audit.record_append(r)
        if r.kind != RecordKind.EGRESS and self.audit.due(r.ts):
            self.audit.flush_block(r.ts)
        self._count("audit_ns", time.perf_counter_ns() - t0)

    def _resolve_hints(self, hints) -> tuple[list, list]:
        """Map token hints to allocator hints (audit ids); stale tokens are ignored."""
        alloc_hints, canon = [], []
        for h in hints:
            if isinstance(h, After):
                entry = self.refs._live.get(h.first)
                if entry is not None:
                    alloc_hints.append(After(entry.audit_id))
                    canon.append(("after", entry.audit_id))
            elif isinstance(h, Parallel):
                if h.k >= 2:
                    alloc_hints.append(Parallel(h.k))
                    canon.append(("parallel", h.k))
            elif self.cfg.secure:
                raise ParamInvalid(f"unknown hint {h!r}")
        return alloc_hints, canon

    def _new_array(self, kind: ArrayKind, dtype: np.dtype, hints=(), generation=None) -> UArray:
        return self.alloc.create(kind, dtype.itemsize, hints, dtype=dtype, generation=generation)

    def _store(self, data: np.ndarray, kind: ArrayKind, hints=(), generation=None, meta=None) -> UArray:
        ua = self._new_array(kind, data.dtype, hints, generation)
        if len(data):
            self.alloc.append(ua, data)
        self.alloc.seal(ua)
        if meta:
            ua.meta.update(meta)
        return ua

    def _retire(self, ua: UArray) -> None:
        if ua.state is ArrayState.PRODUCED:
            self.alloc.retire(ua)

    def _release(self, tokens) -> None:
        for t in tokens:
            entry = self.refs.retire(t) if self.cfg.secure else self.refs._live.pop(t)
            self._retire(entry.array)

    def _dispatch(self, req: GateRequest) -> GateResponse:
        prim = PrimitiveId(req.primitive)
        if prim == PrimitiveId.INGEST:
            return self._ingest(req)
        if prim == PrimitiveId.EGRESS:
            return self._egress(req)
        if prim == PrimitiveId.SEGMENT:
            return self._segment(req)
        if prim in STREAM_PRIMS:
            return self._streaming(prim, req)
        if prim in CLOSE_PRIMS:
            return self._close(prim, req)
        raise ParamInvalid(f"{prim.name} is not invocable")

    # -- ingestion -----------------------------------------------------------

    def _ingest(self, req: GateRequest) -> GateResponse:
        if req.payload is None:
            raise ParamInvalid("INGEST needs a frame")
        buf = req.payload
        if self.cfg.ingest_path is IngestPath.VIA_OS:
            buf = bytes(buf)
            self._count("bytes_copied", len(buf))
        frame = parse_frame(buf)
        if frame.port >= len(self._ports):
            raise RejectedInput(f"frame for unknown port {frame.port}")
        if frame.encrypted:
            if not self.cfg.secure:
                raise RejectedInput("the insecure variant takes cleartext frames only")
            plain = frame_plaintext(frame, self.cfg.ingress_key)
        elif self.cfg.secure and self.cfg.ingress_key is not None and frame.kind != FrameKind.END:
            raise RejectedInput("cleartext frame while ingress encryption is required")
        else:
            plain = frame.payload
        alloc_hints, _ = self._resolve_hints(req.hints)
        with self._ingest_lock:
            now = self._clock()
            if frame.kind == FrameKind.EVENTS:
                outs = self._ingest_events(frame.port, plain, alloc_hints, now)
                return GateResponse(tuple(o[0] for o in outs), tuple(o[1] for o in outs), now)
            if frame.kind == FrameKind.WATERMARK:
                if len(plain) != 8:
                    raise RejectedInput("watermark payload must be 8 bytes")
                (value,) = struct.unpack("<Q", plain)
                if self._wm_value is not None and value <= self._wm_value and self.cfg.secure:
                    raise RejectedInput(f"watermark {value} does not advance past {self._wm_value}")
                outs = self._seal_all(now)
                self._wm_value = value
                ua = self._store(np.array([(value,)], dtype=WATERMARK_DTYPE), ArrayKind.STATE,
                                 meta={"watermark": value, "ts": now})
                token = self.refs.issue(ua)
                if self.cfg.secure:
                    self._record(AuditRecord(now, RecordKind.INGRESS, None, (), (ua.id,),
                                             watermark_value=value, port=frame.port))
                outs.append((token, ("wm", value, self._batch_seq)))
                return GateResponse(tuple(o[0] for o in outs), tuple(o[1] for o in outs), now,
                                    {"watermark": value})
            if frame.kind == FrameKind.END:
                outs = self._seal_all(now)
                return GateResponse(tuple(o[0] for o in outs), tuple(o[1] for o in outs), now,
                                    {"end": True})
            raise RejectedInput(f"{frame.kind.name} frames are not accepted at ingress")

    def _ingest_events(self, port: int, plain, hints, now: int) -> list:
        p = self._ports[port]
        if len(plain) % p.dtype.itemsize:
            raise RejectedInput("events payload is not a whole number of events")
        events = np.frombuffer(plain, dtype=p.dtype)
        self._count("ingested_events", len(events))
        self._count("ingested_bytes", len(plain))
        outs = []
        pos = 0
        chain = hints
        while pos < len(events):
            if p.open_batch is None:
                if not chain and p.next_hint is not None and self.cfg.placement != "fresh":
                    prev = self.alloc.get(p.next_hint)
                    chain = [After(prev.id)] if prev is not None else []
                p.open_batch = self._new_array(ArrayKind.STREAMING, p.dtype, chain,
                                               generation=PrimitiveId.INGEST)
                p.open_batch.meta.update(port=port, late_before=self._wm_value)
                chain = []
            room = self.cfg.batch_size - p.open_batch.length
            take = events[pos:pos + room]
            self.alloc.append(p.open_batch, take)
            pos += len(take)
            if p.open_batch.length >= self.cfg.batch_size:
                outs.append(self._seal_batch(port, now))
        return outs

    def _seal_batch(self, port: int, now: int):
        p = self._ports[port]
        ua = p.open_batch
        p.open_batch = None
        self.alloc.seal(ua)
        ua.meta["seq"] = self._batch_seq
        self._batch_seq += 1
        p.next_hint = ua.id
        token = self.refs.issue(ua)
        if self.cfg.secure:
            self._record(AuditRecord(now, RecordKind.INGRESS, None, (), (ua.id,),
                                     count=ua.length, port=port))
        return token, ("batch", port, ua.meta["seq"], ua.length)

    def _seal_all(self, now: int) -> list:
        return [self._seal_batch(i, now) for i, p in enumerate(self._ports)
                if p.open_batch is not None and p.open_batch.length]

    # -- streaming stages ------------------------------------------------------

    def _take(self, req: GateRequest, expect: int | None = None) -> list[RefEntry]:
        if expect is not None and len(req.inputs) != expect:
            raise ParamInvalid(f"{PrimitiveId(req.primitive).name} takes {expect} input(s)")
        return self.refs.take(tuple(req.inputs))

    def _segment(self, req: GateRequest) -> GateResponse:
        width = req.params.get("width")
        if not isinstance(width, int) or width <= 0:
            raise ParamInvalid(f"window width must be a positive integer, got {width!r}")
        (entry,) = taken = self._take(req, 1)
        try:
            batch = entry.array
            if self.cfg.secure and (batch.kind is not ArrayKind.STREAMING or "seq" not in batch.meta):
                raise ParamInvalid("SEGMENT takes an ingested batch")
            events = self.alloc.read(batch)
            parts, dropped = P.prim_segment(events, width, batch.meta.get("late_before"))
            alloc_hints, canon = self._resolve_hints(req.hints)
        except TeeError:
            self.refs.restore(req.inputs, taken)
            raise
        now = self._clock()
        outs, tags = [], []
        for i, (win, chunk) in enumerate(parts):
            hints = alloc_hints if i == 0 or any(isinstance(h, Parallel) for h in alloc_hints) else ()
            ua = self._store(chunk, ArrayKind.STREAMING, hints, PrimitiveId.SEGMENT,
                             meta={"window": win, "port": batch.meta.get("port", 0),
                                   "seq": batch.meta.get("seq"), "width": width, "sorted": False})
            outs.append(self.refs.issue(ua))
            tags.append(win)
            if self.cfg.secure:
                self._record(AuditRecord(now, RecordKind.WND, PrimitiveId.SEGMENT, (batch.id,), (ua.id,),
                                         window_no=win, count=len(chunk),
                                         hint_digest=hint_digest(canon, ua.id)))
        if dropped:
            self._count("dropped_events", dropped)
            if self.cfg.secure:
                self._record(AuditRecord(now, RecordKind.DROP, PrimitiveId.SEGMENT, (batch.id,),
                                         count=dropped))
        self._retire(batch)
        return GateResponse(tuple(outs), tuple(tags), now, {"dropped": dropped})

    def _streaming(self, prim: PrimitiveId, req: GateRequest) -> GateResponse:
        (entry,) = taken = self._take(req, 1)
        try:
            src = entry.array
            if self.cfg.secure and "window" not in src.meta:
                raise ParamInvalid(f"{prim.name} takes a window chunk")
            events = self.alloc.read(src)
            if prim == PrimitiveId.SORT:
                out = P.prim_sort(events)
            else:
                lo, hi = req.params.get("lo"), req.params.get("hi")
                if not isinstance(lo, int) or not isinstance(hi, int):
                    raise ParamInvalid("FILTER_BAND needs integer lo and hi")
                out = P.prim_filter_band(events, lo, hi)
            alloc_hints, canon = self._resolve_hints(req.hints)
        except TeeError:
            self.refs.restore(req.inputs, taken)
            raise
        meta = dict(src.meta)
        if prim == PrimitiveId.SORT:
            meta["sorted"] = True
        ua = self._store(out, ArrayKind.STREAMING, alloc_hints, prim, meta=meta)
        token = self.refs.issue(ua)
        now = self._clock()
        if self.cfg.secure:
            self._record(AuditRecord(now, RecordKind.EXEC, prim, (src.id,), (ua.id,),
                                     window_no=meta["window"], count=len(out),
                                     hint_digest=hint_digest(canon, ua.id)))
        self._retire(src)
        return GateResponse((token,), (meta["window"],), now)

    # -- window close ----------------------------------------------------------

    def _close(self, prim: PrimitiveId, req: GateRequest) -> GateResponse:
        window = req.params.get("window")
        if not isinstance(window, int) or window < 0:
            raise ParamInvalid(f"close operations need a window index, got {window!r}")
        # watermarks are shared state: looked up, not consumed
        wm_tokens = [t for t in req.inputs if t in self.refs and "watermark" in self.refs.lookup(t).array.meta]
        data_tokens = [t for t in req.inputs if t not in wm_tokens]
        taken = self.refs.take(tuple(data_tokens))
        try:
            arrays = [e.array for e in taken]
            wms = [self.refs.lookup(t).array for t in wm_tokens]
            out, count = self._run_close(prim, req, window, arrays, wms)
            alloc_hints, canon = self._resolve_hints(req.hints)
        except TeeError:
            self.refs.restore(data_tokens, taken)
            raise
        ua = self._store(out, ArrayKind.STATE, alloc_hints, prim,
                         meta={"window": window, "result": True})
        token = self.refs.issue(ua)
        now = self._clock()
        if self.cfg.secure:
            ids = tuple(a.id for a in arrays) + tuple(w.id for w in wms)
            self._record(AuditRecord(now, RecordKind.EXEC, prim, ids, (ua.id,), window_no=window,
                                     count=count, hint_digest=hint_digest(canon, ua.id)))
        for a in arrays:
            self._retire(a)
        return GateResponse((token,), (window,), now, {"count": count})

    def _run_close(self, prim, req, window, arrays, wms):
        secure = self.cfg.secure
        chunks = [a for a in arrays if "result" not in a.meta]
        results = [a for a in arrays if "result" in a.meta]
        if secure:
            for a in arrays:
                if a.meta.get("window") != window:
                    raise ParamInvalid(f"input {a.id} does not belong to window {window}")
            if chunks:
                if results or len(wms) != 1:
                    raise ParamInvalid("a window close takes its chunks and exactly one watermark")
                width = chunks[0].meta["width"]
                if wms[0].meta["watermark"] < (window + 1) * width:
                    raise ParamInvalid(f"watermark {wms[0].meta['watermark']} does not complete window {window}")
            elif len(results) != 1 or wms:
                raise ParamInvalid("a follow-up close step takes exactly one prior result")
        if prim == PrimitiveId.RANK:
            src = self.alloc.read(results[0]) if results else np.zeros(0, AGG_DTYPE)
            if secure and src.dtype != AGG_DTYPE:
                raise ParamInvalid("RANK takes a per-key aggregation")
            out = P.prim_rank(src)
            return out, len(out)
        if prim == PrimitiveId.JOIN:
            left = [self.alloc.read(c) for c in chunks if c.meta.get("port", 0) == 0]
            right = [self.alloc.read(c) for c in chunks if c.meta.get("port", 0) == 1]
            if secure and (not chunks or len(left) + len(right) != len(chunks)):
                raise ParamInvalid("JOIN takes window chunks from ports 0 and 1")
            lhs = P.prim_concat(left) if left else np.zeros(0, chunks[0].dtype)
            rhs = P.prim_concat(right) if right else np.zeros(0, chunks[0].dtype)
            out = P.prim_join(lhs, rhs, chunks[0].meta["width"], window)
            return out, len(out)
        if results:
            data = self.alloc.read(results[0])
            is_sorted = False
        else:
            runs = [self.alloc.read(c) for c in chunks]
            is_sorted = all(c.meta.get("sorted") for c in chunks)
            if prim == PrimitiveId.CONCAT or not is_sorted:
                data = P.prim_concat(runs) if runs else np.zeros(0, KEY_DTYPE)
            else:
                data = P.prim_merge(runs)
        if prim in (PrimitiveId.MERGE, PrimitiveId.CONCAT):
            if prim == PrimitiveId.MERGE and not is_sorted:
                raise ParamInvalid("MERGE takes sorted runs")
            return data, len(data)
        if prim in AGG_BY_PRIM:
            grouped = bool(req.params.get("grouped", False))
            if grouped and not is_sorted:
                raise ParamInvalid("grouped aggregation takes sorted runs")
            out = P.prim_aggregate(data, AGG_BY_PRIM[prim], grouped)
            return out, len(out)
        if prim == PrimitiveId.TOPK:
            k = req.params.get("k")
            if not isinstance(k, int) or k < 1:
                raise ParamInvalid(f"k must be a positive integer, got {k!r}")
            if not is_sorted:
                raise ParamInvalid("TOPK takes sorted runs")
            out = P.prim_topk(data, k)
            return out, len(out)
        if prim == PrimitiveId.UNIQUE:
            if not is_sorted:
                raise ParamInvalid("UNIQUE takes sorted runs")
            out, n = P.prim_unique(data)
            return out, n
        raise ParamInvalid(f"{prim.name} is not a close operation")

    # -- egress ------------------------------------------------------------------

    def _egress(self, req: GateRequest) -> GateResponse:
        window = req.params.get("window")
        (entry,) = taken = self._take(req, 1)
        ua = entry.array
        if self.cfg.secure and ("result" not in ua.meta or ua.meta.get("window") != window):
            self.refs.restore(req.inputs, taken)
            raise ParamInvalid("EGRESS takes the result of the named window")
        data = self.alloc.raw_bytes(ua)
        key = self.cfg.egress_key if self.cfg.secure else None
        frame = result_frame(ua.meta.get("window", 0), data, key)
        with self._egress_lock:
            now = self._clock()
            if self.cfg.secure:
                self._record(AuditRecord(now, RecordKind.EGRESS, None, (ua.id,), (),
                                         window_no=ua.meta.get("window"), count=ua.length))
                t0 = time.perf_counter_ns()
                self.audit.flush_block(now)
                self._count("audit_ns", time.perf_counter_ns() - t0)
            self._count("egressed")
        self._retire(ua)
        return GateResponse((), (window,), now, {"frame": frame, "dtype": ua.dtype.descr})
