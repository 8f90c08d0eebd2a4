"""Untrusted control plane: ingestion loop, worker pool, window bookkeeping, hints.

The engine holds only opaque references and window bookkeeping. A batch moves
through its port's streaming stages as independent tasks; the last stage's
outputs are parked per window. Window ``w`` closes once its closing watermark
(the first with value >= (w+1)*width) has been ingested and every batch
ingested before that watermark has finished its streaming stages. Closing runs
the plan's close chain and then EGRESS.
"""

from __future__ import annotations

import collections
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .codec import BlockCodec
from .dataplane import DataPlane, GateConfig, GateRequest
from .errors import ParamInvalid
from .iogateway import (
    DEFAULT_EGRESS_KEY,
    DEFAULT_INGRESS_KEY,
    FrameKind,
    IngestPath,
    decode_result,
    end_frame,
)
from .memory import After, Parallel
from .model import Plan, PipelineDecl, PrimitiveId, compile_plan

MiB = 1024 * 1024
VARIANTS = ("sbt", "clear-ingress", "io-via-os", "insecure")


@dataclass
class EngineConfig:
    workers: int = 1
    batch_size: int = 100_000
    target_delay_ms: float | None = None
    high_water: int = 512 * MiB
    variant: str = "sbt"
    strict_gate: bool = False
    hints: bool = True
    placement: str | None = None
    synchronous: bool = False
    capacity: int | None = None
    audit_encrypt: bool = False
    audit_sink: Callable[[bytes], None] | None = None
    keep_records: bool = False
    clock: Callable[[], int] | None = None
    rate_eps: float | None = None

    def __post_init__(self):
        if self.workers < 1:
            raise ParamInvalid("worker_count must be >= 1")
        if self.batch_size < 1:
            raise ParamInvalid("batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ParamInvalid(f"variant must be one of {', '.join(VARIANTS)}")

    @property
    def secure(self) -> bool:
        return self.variant != "insecure"

    @property
    def ingress_key(self) -> bytes | None:
        """Key the source must encrypt with, or None for cleartext ingress."""
        return DEFAULT_INGRESS_KEY if self.variant in ("sbt", "io-via-os") else None

    @property
    def egress_key(self) -> bytes | None:
        return DEFAULT_EGRESS_KEY if self.secure else None

    def gate_config(self, plan: Plan) -> GateConfig:
        return GateConfig(
            fields=plan.fields,
            batch_size=self.batch_size,
            secure=self.secure,
            ingress_key=self.ingress_key,
            egress_key=self.egress_key,
            ingest_path=IngestPath.VIA_OS if self.variant == "io-via-os" else IngestPath.TRUSTED_DIRECT,
            strict_gate=self.strict_gate,
            placement=self.placement or ("hints" if self.hints else "fresh"),
            capacity=self.capacity,
            codec=BlockCodec(encrypt=self.audit_encrypt),
            audit_sink=self.audit_sink,
            keep_records=self.keep_records,
            clock=self.clock,
        )


# ---------------------------------------------------------------------------
# backpressure

class BackpressureCtl:
    """Ingestion gate with hysteresis: closes above ``high``, reopens below 75% of it."""

    def __init__(self, high_water: int | None):
        self.high = high_water
        self.low = None if high_water is None else high_water - high_water // 4
        self.open = True
        self.closures = 0

    def update(self, resident_bytes: int) -> bool:
        if self.high is None:
            return True
        if self.open and resident_bytes > self.high:
            self.open = False
            self.closures += 1
        elif not self.open and resident_bytes < self.low:
            self.open = True
        return self.open


def backpressure_ctl(stats, ctl: BackpressureCtl) -> bool:
    resident = stats["resident_bytes"] if isinstance(stats, dict) else stats.resident_bytes
    return ctl.update(resident)


# ---------------------------------------------------------------------------
# hints

def emit_hints(stage: str, *, enabled: bool = True, workers: int = 1, fan_out: bool = False,
               after=None) -> tuple:
    """Consumption hints for one invocation.

    ``fan_out`` marks outputs that ``workers`` threads will pick up concurrently;
    ``after`` names the reference the output will be consumed after.
    """
    if not enabled:
        return ()
    if fan_out and workers >= 2:
        return (Parallel(workers),)
    if after is not None:
        return (After(after),)
    return ()


# ---------------------------------------------------------------------------
# run report

@dataclass
class RunReport:
    results: dict = field(default_factory=dict)     # window -> egress frame as emitted
    payloads: dict = field(default_factory=dict)    # window -> decrypted result bytes
    delays_us: dict = field(default_factory=dict)   # window -> output delay
    events: int = 0
    bytes_in: int = 0
    elapsed_s: float = 0.0
    cpu_s: float = 0.0
    counters: dict = field(default_factory=dict)
    backpressure_closures: int = 0
    backpressure_overrides: int = 0
    pending_windows: tuple = ()
    error: str | None = None

    @property
    def throughput_eps(self) -> float:
        return self.events / self.elapsed_s if self.elapsed_s > 0 else 0.0

    @property
    def throughput_mbps(self) -> float:
        return self.bytes_in / self.elapsed_s / 1e6 if self.elapsed_s > 0 else 0.0

    @property
    def peak_resident_bytes(self) -> int:
        return self.counters.get("peak_resident_bytes", 0)

    @property
    def max_delay_ms(self) -> float:
        return max(self.delays_us.values(), default=0) / 1000


# ---------------------------------------------------------------------------
# engine

@dataclass
class _Watermark:
    value: int
    ref: int
    ts: int
    boundary: int           # batches with seq below this were ingested before it
    ready: bool = False
    pending: int = 0


@dataclass
class _Window:
    chunks: list = field(default_factory=list)    # (port, seq, ref)
    closed: bool = False
    wm: _Watermark | None = None


class Engine:
    def __init__(self, pipeline: PipelineDecl | Plan, config: EngineConfig | None = None,
                 sink: Callable[[int, bytes], None] | None = None):
        self.plan = pipeline if isinstance(pipeline, Plan) else compile_plan(pipeline)
        self.cfg = config or EngineConfig()
        self.sink = sink
        self.dp = DataPlane()
        self.bp = BackpressureCtl(self.cfg.high_water)
        self._lock = threading.Lock()
        self._idle = threading.Condition(self._lock)
        self._inflight = 0
        self._pending_batches: dict[int, int] = {}
        self._windows: dict[int, _Window] = {}
        self._wms: list[_Watermark] = []
        self._release: list[int] = []
        self._last_batch: dict[int, int] = {}
        self._last_final: dict[int, int] = {}
        self._egress_lock = threading.Lock()
        self._error: BaseException | None = None
        self.report = RunReport()

    # -- task plumbing -------------------------------------------------------

    def _submit(self, fn, *args) -> None:
        with self._lock:
            self._inflight += 1
        if self._pool is None:
            self._queue.append((fn, args))
        else:
            self._pool.submit(self._run_task, fn, args)

    def _run_task(self, fn, args) -> None:
        try:
            if self._error is None:
                fn(*args)
        except BaseException as exc:  # surfaced by run()
            with self._lock:
                if self._error is None:
                    self._error = exc
        finally:
            with self._lock:
                self._inflight -= 1
                self._idle.notify_all()

    def _drain_sync(self) -> None:
        while self._queue:
            fn, args = self._queue.popleft()
            self._run_task(fn, args)

    def _call(self, req: GateRequest):
        with self._lock:
            if self._release:
                req.release, self._release = tuple(self._release), []
        try:
            return self.dp.invoke(req)
        except BaseException:
            if req.release:
                with self._lock:
                    self._release.extend(req.release)
            raise

    # -- streaming -------------------------------------------------------------

    def _stream(self, port: int, stage_no: int, ref: int, seq: int, window: int | None) -> None:
        chain = self.plan.streaming[port]
        stage = chain[stage_no]
        last = stage_no == len(chain) - 1
        if stage.prim == PrimitiveId.SEGMENT:
            hints = emit_hints("segment", enabled=self.cfg.hints, workers=self.cfg.workers,
                               fan_out=not last, after=self._last_final.get(port) if last else None)
            resp = self._call(GateRequest(PrimitiveId.SEGMENT, (ref,), {"width": stage.param("width")}, hints))
        else:
            with self._lock:
                prev = self._windows.get(window)
                after = prev.chunks[-1][2] if prev and prev.chunks and last else None
            hints = emit_hints("stream", enabled=self.cfg.hints, after=after)
            resp = self._call(GateRequest(stage.prim, (ref,), dict(stage.params), hints))
        children = []
        with self._lock:
            for out, win in zip(resp.outputs, resp.tags):
                if last:
                    self._windows.setdefault(win, _Window()).chunks.append((port, seq, out))
                    self._last_final[port] = out
                else:
                    children.append((out, win))
            # children are counted before they can start, so the batch cannot drain early
            ready = self._settle(seq, len(children) - 1)
        for out, win in children:
            self._submit(self._stream, port, stage_no + 1, out, seq, win)
        if ready:
            self._schedule_closes()

    def _settle(self, seq: int, delta: int) -> bool:
        left = self._pending_batches[seq] + delta
        if left:
            self._pending_batches[seq] = left
            return False
        del self._pending_batches[seq]
        return True

    # -- window close ----------------------------------------------------------------

    def _schedule_closes(self) -> None:
        width = self.plan.width
        todo = []
        with self._lock:
            for wm in self._wms:
                if wm.ready:
                    continue
                if any(s < wm.boundary for s in self._pending_batches):
                    break
                wm.ready = True
                for w in sorted(self._windows):
                    st = self._windows[w]
                    if not st.closed and (w + 1) * width <= wm.value:
                        st.closed = True
                        st.wm = wm
                        wm.pending += 1
                        todo.append((w, st, wm))
                if wm.pending == 0:
                    self._release.append(wm.ref)
        for w, st, wm in todo:
            self._submit(self._close, w, st, wm)

    def _close(self, window: int, st: _Window, wm: _Watermark) -> None:
        chunks = sorted(st.chunks)
        ref = None
        for i, stage in enumerate(self.plan.close):
            params = dict(stage.params)
            params["window"] = window
            inputs = tuple(c[2] for c in chunks) + (wm.ref,) if i == 0 else (ref,)
            resp = self._call(GateRequest(stage.prim, inputs, params))
            ref = resp.outputs[0]
            if i == 0:
                with self._lock:
                    wm.pending -= 1
                    if wm.pending == 0:
                        self._release.append(wm.ref)
        with self._egress_lock:
            resp = self._call(GateRequest(PrimitiveId.EGRESS, (ref,), {"window": window}))
            frame = resp.info["frame"]
            with self._lock:
                self.report.results[window] = frame
                self.report.delays_us[window] = resp.ts - wm.ts
            if self.sink is not None:
                self.sink(window, frame)

    # -- ingestion -----------------------------------------------------------------

    def _admit(self) -> None:
        """Block EVENTS frames while secure memory is above the high-water mark."""
        while not backpressure_ctl(self.dp.debug_dump(), self.bp):
            if self._pool is None:
                self._drain_sync()
                if not backpressure_ctl(self.dp.debug_dump(), self.bp):
                    self.report.backpressure_overrides += 1
                    return
                continue
            with self._lock:
                busy = self._inflight > 0
                if busy:
                    self._idle.wait(timeout=0.05)
            if not busy:
                # nothing in flight can free memory: admit rather than deadlock
                self.report.backpressure_overrides += 1
                return

    def _ingest(self, frame) -> None:
        tb = frame[0]
        kind = tb & 0x7
        port = tb >> 4
        if kind == FrameKind.EVENTS:
            self._admit()
        hints = emit_hints("ingest", enabled=self.cfg.hints, after=self._last_batch.get(port))
        resp = self._call(GateRequest(PrimitiveId.INGEST, payload=memoryview(frame), hints=hints))
        batches = []
        with self._lock:
            for ref, tag in zip(resp.outputs, resp.tags):
                if tag[0] == "batch":
                    _, p, seq, n = tag
                    self._pending_batches[seq] = 1
                    self._last_batch[p] = ref
                    batches.append((p, ref, seq))
                else:
                    self._wms.append(_Watermark(tag[1], ref, resp.ts, tag[2]))
        for p, ref, seq in batches:
            self._submit(self._stream, p, 0, ref, seq, None)
        if kind in (FrameKind.WATERMARK, FrameKind.END):
            self._schedule_closes()

    def run(self, source: Iterable[bytes]) -> RunReport:
        cfg = self.cfg
        self.dp.init(cfg.gate_config(self.plan))
        self._queue = collections.deque()
        self._pool = None if cfg.synchronous else ThreadPoolExecutor(cfg.workers, "teestream-worker")
        rep = self.report
        t0 = time.perf_counter()
        c0 = time.process_time()
        events_in = 0
        try:
            for frame in source:
                if self._error is not None:
                    break
                if cfg.rate_eps:
                    due = t0 + events_in / cfg.rate_eps
                    lag = due - time.perf_counter()
                    if lag > 0:
                        time.sleep(lag)
                if frame[0] & 0x7 == FrameKind.EVENTS:
                    per = 16 if self.plan.fields[(frame[0] >> 4)] == 4 else 12
                    enc = 28 if frame[0] & 0x8 else 0
                    events_in += (len(frame) - 5 - enc) // per
                self._ingest(frame)
                if self._pool is None:
                    self._drain_sync()
            self._ingest(end_frame())
        except BaseException as exc:
            rep.error = f"{type(exc).__name__}: {exc}"
        finally:
            if self._pool is None:
                self._drain_sync()
            else:
                with self._lock:
                    while self._inflight:
                        self._idle.wait()
                self._pool.shutdown(wait=True)
            rep.elapsed_s = time.perf_counter() - t0
            rep.cpu_s = time.process_time() - c0
            rep.counters = self.dp.finalize()
        if self._error is not None and rep.error is None:
            rep.error = f"{type(self._error).__name__}: {self._error}"
        rep.events = rep.counters.get("ingested_events", 0)
        rep.bytes_in = rep.counters.get("ingested_bytes", 0)
        rep.backpressure_closures = self.bp.closures
        rep.pending_windows = tuple(sorted(w for w, st in self._windows.items() if not st.closed))
        for w, frame in rep.results.items():
            rep.payloads[w] = decode_result(frame, cfg.egress_key)[1]
        return rep


def run_pipeline(decl: PipelineDecl | Plan, config: EngineConfig | None, source: Iterable[bytes],
                 sink: Callable[[int, bytes], None] | None = None) -> RunReport:
    return Engine(decl, config, sink).run(source)
