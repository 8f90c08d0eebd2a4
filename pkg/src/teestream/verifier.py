"""Cloud-side replay of an audit stream against a local copy of the pipeline.

Replay is symbolic: each uArray id maps to what produced it (port, stage,
window) and whether it has been consumed. Records are checked in append order,
which is causal because the data plane appends a record before the call that
produced the output returns. Timestamps play no part in correctness; they are
used only to compute output delays.
"""

from __future__ import annotations

import json
import random
import time
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable

from .audit import AuditRecord, RecordKind
from .codec import BlockCodec
from .errors import AuthFail, Corrupt, VerificationRefused
from .model import Plan, PipelineDecl, PrimitiveId, compile_plan

# id roles
BATCH, WM, CHUNK, RESULT = "batch", "wm", "chunk", "result"


@dataclass
class _Id:
    role: str
    seq: int                      # record that introduced it
    port: int = 0
    stage: int = 0                # streaming: index of the next stage to run; close: steps done
    window: int | None = None
    count: int | None = None
    consumed_at: int | None = None
    wm_value: int | None = None   # watermark value, or the watermark in force for a batch
    ts: int = 0
    after: int | None = None      # After hint recorded when this id was produced


@dataclass
class Violation:
    kind: str
    seq: int | None
    detail: str

    def __str__(self) -> str:
        where = f"record {self.seq}: " if self.seq is not None else ""
        return f"{self.kind}: {where}{self.detail}"


@dataclass
class EgressDelay:
    window: int | None
    result: int
    watermark: int | None
    delay_us: int | None

    @property
    def attributable(self) -> bool:
        return self.watermark is not None


@dataclass
class VerdictReport:
    correct: bool
    violation: Violation | None = None
    pending_windows: tuple = ()
    delays: list[EgressDelay] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    records: int = 0
    blocks: int = 0
    elapsed_s: float = 0.0

    @property
    def unattributable(self) -> list[EgressDelay]:
        return [d for d in self.delays if not d.attributable]

    @property
    def fresh(self) -> bool:
        return not self.unattributable

    def delay_of(self, window: int) -> int | None:
        for d in self.delays:
            if d.window == window:
                return d.delay_us
        return None

    def to_dict(self) -> dict:
        return {
            "correct": self.correct,
            "violation": None if self.violation is None else asdict(self.violation),
            "pending_windows": list(self.pending_windows),
            "delays": [asdict(d) for d in self.delays],
            "unattributable": [d.result for d in self.unattributable],
            "warnings": self.warnings,
            "records": self.records,
            "blocks": self.blocks,
            "elapsed_s": self.elapsed_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class _Fail(Exception):
    def __init__(self, kind: str, seq: int | None, detail: str):
        super().__init__(detail)
        self.violation = Violation(kind, seq, detail)


_PARALLEL_DIGESTS = {zlib.crc32(f"P:{k}".encode()): k for k in range(2, 257)}
# After hints are rendered as a distance below the record's first output id
MAX_HINT_DISTANCE = 4096
_AFTER_DIGESTS = {zlib.crc32(f"A:{d}".encode()): d for d in range(1, MAX_HINT_DISTANCE + 1)}
assert len(_AFTER_DIGESTS) == MAX_HINT_DISTANCE and not _AFTER_DIGESTS.keys() & _PARALLEL_DIGESTS.keys()


class Replay:
    """Replay state for one audit stream. Feed records in order, then :meth:`finish`."""

    def __init__(self, plan: Plan, final: bool = True):
        self.plan = plan
        self.final = final
        self.width = plan.width
        self.ids: dict[int, _Id] = {}
        self.wms: list[_Id] = []          # in ingest order
        self.wm_value: int | None = None
        self.open_chunks: dict[int, set[int]] = {}   # window -> unconsumed chunk ids
        self.closed: dict[int, int] = {}  # window -> seq of its first close step
        self.results: dict[int, int] = {}  # window -> id of the live result
        self.egressed: set[int] = set()
        self.batches: dict[int, list] = {}  # batch id -> [ingested, accounted]
        self.producer: dict[int, AuditRecord] = {}
        self.warnings: list[str] = []
        self.seq = 0

    # -- helpers ---------------------------------------------------------------

    def _introduce(self, ident: int, info: _Id) -> None:
        if ident in self.ids:
            raise _Fail("duplicate_id", self.seq, f"id 0x{ident:X} introduced twice")
        self.ids[ident] = info

    def _consume(self, ident: int, role: str | tuple) -> _Id:
        info = self.ids.get(ident)
        if info is None:
            raise _Fail("unknown_id", self.seq, f"id 0x{ident:X} was never introduced")
        roles = role if isinstance(role, tuple) else (role,)
        if info.role not in roles:
            raise _Fail("wrong_primitive", self.seq, f"id 0x{ident:X} is a {info.role}, not a {'/'.join(roles)}")
        if info.consumed_at is not None:
            raise _Fail("reused_id", self.seq, f"id 0x{ident:X} already consumed by record {info.consumed_at}")
        info.consumed_at = self.seq
        return info

    def _check_hints(self, idents) -> None:
        """After(x) on an id is misleading when x outlives it; one record consumes its inputs together."""
        for ident in idents:
            info = self.ids[ident]
            if info.after is None:
                continue
            prior = self.ids.get(info.after)
            if prior is not None and prior.role != WM and prior.consumed_at is None:
                self.warnings.append(
                    f"record {self.seq}: hint said 0x{ident:X} follows 0x{info.after:X}, "
                    f"which is still unconsumed")

    def _window_of(self, r: AuditRecord, inferred: int) -> int:
        if r.window_no is not None and r.window_no != inferred:
            raise _Fail("window", self.seq, f"record says window {r.window_no}, inputs belong to {inferred}")
        return inferred

    def _decode_hint(self, r: AuditRecord) -> int | None:
        if r.hint_digest is None:
            return None
        if r.hint_digest in _PARALLEL_DIGESTS:
            return None
        dist = _AFTER_DIGESTS.get(r.hint_digest)
        target = None if dist is None or not r.outputs else r.outputs[0] - dist
        if target is None or target not in self.ids:
            self.warnings.append(f"record {self.seq}: unrecognised hint digest 0x{r.hint_digest:08X}")
        return target

    def _no_window_field(self, r: AuditRecord) -> None:
        if r.window_no is not None:
            raise _Fail("window", self.seq, f"{r.kind.name} records carry no window number")

    # -- record handlers -------------------------------------------------------------

    def feed(self, r: AuditRecord) -> None:
        kind = r.kind
        if kind == RecordKind.INGRESS:
            self._ingress(r)
        elif kind == RecordKind.WND:
            self._wnd(r)
        elif kind == RecordKind.DROP:
            self._drop(r)
        elif kind == RecordKind.EXEC:
            src = self.ids.get(r.inputs[0]) if len(r.inputs) == 1 else None
            if r.op in (PrimitiveId.SORT, PrimitiveId.FILTER_BAND) and src is not None and src.role == CHUNK:
                self._streaming(r)
            else:
                self._close(r)
        elif kind == RecordKind.EGRESS:
            self._egress(r)
        elif kind == RecordKind.REJECT:
            op = r.op.name if r.op is not None else "?"
            self.warnings.append(f"record {self.seq}: gate rejected a {op} request")
        self.seq += 1

    def _ingress(self, r: AuditRecord) -> None:
        self._no_window_field(r)
        if r.inputs or len(r.outputs) != 1:
            raise _Fail("shape", self.seq, "INGRESS introduces exactly one id")
        (ident,) = r.outputs
        if r.watermark_value is not None:
            if self.wm_value is not None and r.watermark_value <= self.wm_value:
                raise _Fail("watermark", self.seq,
                            f"watermark {r.watermark_value} does not advance past {self.wm_value}")
            info = _Id(WM, self.seq, r.port, wm_value=r.watermark_value, ts=r.ts)
            self._introduce(ident, info)
            self.wm_value = r.watermark_value
            self.wms.append(info)
        else:
            if r.port >= len(self.plan.ports):
                raise _Fail("shape", self.seq, f"batch for undeclared port {r.port}")
            self._introduce(ident, _Id(BATCH, self.seq, r.port, count=r.count,
                                       wm_value=self.wm_value, ts=r.ts))
            self.batches[ident] = [r.count, 0]
        self.producer[ident] = r

    def _account(self, batch_id: int, n: int | None) -> None:
        acct = self.batches[batch_id]
        if n is None or acct[0] is None:
            acct[0] = None
            return
        acct[1] += n
        if acct[1] > acct[0]:
            raise _Fail("count", self.seq, f"batch 0x{batch_id:X} accounts for {acct[1]} of {acct[0]} events")

    def _batch(self, r: AuditRecord) -> _Id:
        if len(r.inputs) != 1:
            raise _Fail("shape", self.seq, f"{r.kind.name} takes exactly one batch")
        (bid,) = r.inputs
        info = self.ids.get(bid)
        if info is None:
            raise _Fail("unknown_id", self.seq, f"id 0x{bid:X} was never introduced")
        if info.role != BATCH:
            raise _Fail("wrong_primitive", self.seq, f"id 0x{bid:X} is a {info.role}, not an ingested batch")
        if info.consumed_at is not None:
            raise _Fail("reused_id", self.seq, f"batch 0x{bid:X} was already fully accounted for")
        return info

    def _wnd(self, r: AuditRecord) -> None:
        batch = self._batch(r)
        if r.op not in (None, PrimitiveId.SEGMENT):
            raise _Fail("wrong_primitive", self.seq, "WND records come from SEGMENT")
        if len(r.outputs) != 1 or r.window_no is None:
            raise _Fail("shape", self.seq, "WND names one output and its window")
        w = r.window_no
        if batch.wm_value is not None and w < batch.wm_value // self.width:
            raise _Fail("late", self.seq, f"window {w} was complete before its batch arrived")
        if w in self.closed:
            raise _Fail("closed_window", self.seq, f"window {w} already closed at record {self.closed[w]}")
        self._account(r.inputs[0], r.count)
        (out,) = r.outputs
        self._introduce(out, _Id(CHUNK, self.seq, batch.port, stage=1, window=w, count=r.count,
                                 ts=r.ts, after=self._decode_hint(r)))
        self.open_chunks.setdefault(w, set()).add(out)
        self.producer[out] = r

    def _drop(self, r: AuditRecord) -> None:
        self._no_window_field(r)
        self._batch(r)
        if r.outputs:
            raise _Fail("shape", self.seq, "DROP produces nothing")
        self._account(r.inputs[0], r.count)

    def _streaming(self, r: AuditRecord) -> None:
        if len(r.outputs) != 1:
            raise _Fail("shape", self.seq, f"{r.op.name} produces one chunk")
        src_id = r.inputs[0]
        src = self._consume(src_id, CHUNK)
        self._check_hints((src_id,))
        chain = self.plan.streaming[src.port]
        if src.stage >= len(chain) or chain[src.stage].prim != r.op:
            want = chain[src.stage].prim.name if src.stage < len(chain) else "window close"
            raise _Fail("wrong_primitive", self.seq, f"chunk 0x{src_id:X} is due for {want}, got {r.op.name}")
        w = self._window_of(r, src.window)
        if src.count is not None and r.count is not None:
            if (r.op == PrimitiveId.SORT and r.count != src.count) or r.count > src.count:
                raise _Fail("count", self.seq, f"{r.op.name} turned {src.count} items into {r.count}")
        (out,) = r.outputs
        self._introduce(out, _Id(CHUNK, self.seq, src.port, stage=src.stage + 1, window=w,
                                 count=r.count, ts=r.ts, after=self._decode_hint(r)))
        chunks = self.open_chunks[w]
        chunks.discard(src_id)
        chunks.add(out)
        self.producer[out] = r

    def _closing_wm(self, w: int) -> _Id | None:
        bound = (w + 1) * self.width
        for wm in self.wms:
            if wm.wm_value >= bound:
                return wm
        return None

    def _close(self, r: AuditRecord) -> None:
        if len(r.outputs) != 1 or not r.inputs:
            raise _Fail("shape", self.seq, "a close step maps its inputs to one result")
        first = self.ids.get(r.inputs[0])
        if first is not None and first.role == RESULT:
            self._close_step(r)
        else:
            self._close_first(r)
        self.producer[r.outputs[0]] = r

    def _close_first(self, r: AuditRecord) -> None:
        wm_ids = [i for i in r.inputs if i in self.ids and self.ids[i].role == WM]
        data = [i for i in r.inputs if i not in wm_ids]
        if not data:
            raise _Fail("shape", self.seq, "window close without window data")
        known = [self.ids[i] for i in data if i in self.ids and self.ids[i].role == CHUNK]
        unknown = [i for i in data if i not in self.ids]
        if r.window_no is not None:
            w = r.window_no
        elif known:
            w = known[0].window
        elif len(wm_ids) == 1 and (cands := [
                x for x, ids in self.open_chunks.items()
                if ids and self._closing_wm(x) is self.ids[wm_ids[0]]]):
            # inputs unknown: judge the oldest window this watermark completes
            w = min(cands)
        else:
            raise _Fail("unknown_id", self.seq, f"id 0x{(unknown or data)[0]:X} was never introduced")
        if w in self.closed:
            raise _Fail("closed_window", self.seq, f"window {w} already closed at record {self.closed[w]}")
        final_stage = {p: len(c) for p, c in enumerate(self.plan.streaming)}
        open_now = self.open_chunks.get(w, set())
        # a chunk that skipped a stage outranks whatever the record names in its place
        unprocessed = sorted(c for c in open_now if self.ids[c].stage != final_stage[self.ids[c].port])
        if unprocessed:
            raise _Fail("unprocessed", self.seq, f"0x{unprocessed[0]:X} is unprocessed at the close of window {w}")
        if unknown:
            raise _Fail("unknown_id", self.seq, f"id 0x{unknown[0]:X} was never introduced")
        missing = sorted(c for c in open_now if c not in data)
        if missing:
            raise _Fail("unprocessed", self.seq, f"0x{missing[0]:X} is unprocessed at the close of window {w}")
        for i in data:
            info = self._consume(i, CHUNK)
            if info.window != w:
                raise _Fail("window", self.seq, f"chunk 0x{i:X} belongs to window {info.window}, not {w}")
        self._check_hints(data)
        if r.op != self.plan.close[0].prim:
            raise _Fail("wrong_primitive", self.seq,
                        f"window close runs {self.plan.close[0].prim.name}, got {r.op.name}")
        expect = self._closing_wm(w)
        if expect is None:
            raise _Fail("early_close", self.seq, f"no watermark completes window {w} yet")
        got = [self.ids[i] for i in wm_ids]
        if len(got) != 1 or got[0] is not expect:
            raise _Fail("watermark", self.seq, f"window {w} must be closed by the watermark {expect.wm_value}")
        self.closed[w] = self.seq
        self.open_chunks.pop(w, None)
        self._introduce(r.outputs[0], _Id(RESULT, self.seq, stage=1, window=w, count=r.count,
                                          ts=r.ts, after=self._decode_hint(r)))
        self.results[w] = r.outputs[0]

    def _close_step(self, r: AuditRecord) -> None:
        if len(r.inputs) != 1:
            raise _Fail("shape", self.seq, "a follow-up close step takes one prior result")
        src = self._consume(r.inputs[0], RESULT)
        self._check_hints(r.inputs)
        w = self._window_of(r, src.window)
        chain = self.plan.close
        if src.stage >= len(chain) or chain[src.stage].prim != r.op:
            want = chain[src.stage].prim.name if src.stage < len(chain) else "EGRESS"
            raise _Fail("wrong_primitive", self.seq, f"result of window {w} is due for {want}, got {r.op.name}")
        self._introduce(r.outputs[0], _Id(RESULT, self.seq, stage=src.stage + 1, window=w,
                                          count=r.count, ts=r.ts, after=self._decode_hint(r)))
        self.results[w] = r.outputs[0]

    def _egress(self, r: AuditRecord) -> None:
        if len(r.inputs) != 1 or r.outputs:
            raise _Fail("shape", self.seq, "EGRESS externalises exactly one result")
        src = self._consume(r.inputs[0], RESULT)
        w = self._window_of(r, src.window)
        if src.stage != len(self.plan.close):
            raise _Fail("unprocessed", self.seq, f"window {w} egressed before its close chain finished")
        if w in self.egressed:
            raise _Fail("double_egress", self.seq, f"window {w} egressed twice")
        self.egressed.add(w)

    # -- end of stream ------------------------------------------------------------

    def finish(self) -> tuple:
        pending = sorted(w for w, ids in self.open_chunks.items() if ids)
        if self.final:
            for w in pending:
                if self._closing_wm(w) is not None:
                    raise _Fail("unprocessed", None, f"window {w} was complete but never closed")
            for w in self.closed:
                if w not in self.egressed:
                    raise _Fail("unprocessed", None, f"window {w} closed but its result never left")
            for bid, (n, seen) in self.batches.items():
                if n is not None and seen != n:
                    raise _Fail("count", None, f"batch 0x{bid:X} accounts for {seen} of {n} events")
        return tuple(pending)

    def freshness(self, records: list[AuditRecord]) -> list[EgressDelay]:
        """Trace each EGRESS back along derived-from edges to the watermark that triggered it."""
        out = []
        for r in records:
            if r.kind != RecordKind.EGRESS or len(r.inputs) != 1:
                continue
            res = r.inputs[0]
            seen = {res}
            queue = deque([res])
            found = []
            while queue:
                cur = queue.popleft()
                rec = self.producer.get(cur)
                if rec is None:
                    continue
                if rec.kind == RecordKind.INGRESS:
                    if rec.watermark_value is not None:
                        found.append(rec)
                    continue
                for i in rec.inputs:
                    if i not in seen:
                        seen.add(i)
                        queue.append(i)
            window = r.window_no
            if window is None:
                info = self.ids.get(res)
                window = info.window if info else None
            if len(found) == 1:
                out.append(EgressDelay(window, res, found[0].outputs[0], r.ts - found[0].ts))
            else:
                out.append(EgressDelay(window, res, None, None))
        return out


def _as_plan(decl: PipelineDecl | Plan) -> Plan:
    return decl if isinstance(decl, Plan) else compile_plan(decl)


def verify_records(records: list[AuditRecord], decl: PipelineDecl | Plan, final: bool = True) -> VerdictReport:
    t0 = time.perf_counter()
    rp = Replay(_as_plan(decl), final)
    violation = None
    pending = ()
    try:
        for r in records:
            rp.feed(r)
        pending = rp.finish()
    except _Fail as exc:
        violation = exc.violation
        pending = tuple(sorted(w for w, ids in rp.open_chunks.items() if ids))
    delays = rp.freshness(records)
    return VerdictReport(
        correct=violation is None,
        violation=violation,
        pending_windows=pending,
        delays=delays,
        warnings=rp.warnings,
        records=len(records),
        elapsed_s=time.perf_counter() - t0,
    )


def decode_blocks(blocks: Iterable[bytes], codec: BlockCodec | None = None) -> tuple[list[AuditRecord], int]:
    """Authenticate and decode every block; any failure refuses the whole stream."""
    codec = codec or BlockCodec()
    records = []
    n = 0
    for i, b in enumerate(blocks):
        try:
            records.extend(codec.decode(b))
        except (AuthFail, Corrupt) as exc:
            raise VerificationRefused(f"block {i}: {exc}") from exc
        n += 1
    return records, n


def verify_correctness(blocks: Iterable[bytes], decl: PipelineDecl | Plan, final: bool = True,
                       codec: BlockCodec | None = None) -> VerdictReport:
    t0 = time.perf_counter()
    records, n = decode_blocks(blocks, codec)
    rep = verify_records(records, decl, final)
    rep.blocks = n
    rep.elapsed_s = time.perf_counter() - t0
    return rep


verify = verify_correctness


def verify_freshness(blocks: Iterable[bytes], decl: PipelineDecl | Plan,
                     codec: BlockCodec | None = None) -> list[EgressDelay]:
    """Per-egress delays. Runs the replay with final checks off, so a failing stream still yields delays."""
    records, _ = decode_blocks(blocks, codec)
    return verify_records(records, decl, final=False).delays


# ---------------------------------------------------------------------------
# mutations (soundness testing)

MUTATIONS = ("delete", "duplicate", "substitute", "window")


def mutate(records: list[AuditRecord], how: str, rng: random.Random) -> tuple[list[AuditRecord], str]:
    """Apply one random single-record mutation; returns the new stream and a description."""
    out = list(records)
    ids = sorted({i for r in records for i in r.inputs + r.outputs})
    if how == "delete":
        i = rng.randrange(len(out))
        del out[i]
        return out, f"delete record {i}"
    if how == "duplicate":
        i = rng.randrange(len(out))
        out.insert(i + 1, out[i])
        return out, f"duplicate record {i}"
    if how == "substitute":
        cands = [k for k, r in enumerate(out) if r.inputs or r.outputs]
        i = rng.choice(cands)
        r = out[i]
        slots = [("inputs", j) for j in range(len(r.inputs))] + [("outputs", j) for j in range(len(r.outputs))]
        name, j = rng.choice(slots)
        old = getattr(r, name)[j]
        new = old
        while new == old:
            new = rng.choice(ids) if rng.random() < 0.5 else rng.randrange(1, 2 * max(ids) + 2)
        vals = list(getattr(r, name))
        vals[j] = new
        out[i] = _replace(r, **{name: tuple(vals)})
        return out, f"record {i}: {name}[{j}] 0x{old:X} -> 0x{new:X}"
    if how == "window":
        i = rng.randrange(len(out))
        r = out[i]
        old = r.window_no
        new = old
        while new == old:
            new = rng.randrange(0, 2 * (old or 4) + 4)
        out[i] = _replace(r, window_no=new)
        return out, f"record {i}: window {old} -> {new}"
    raise ValueError(how)


def _replace(r: AuditRecord, **kw) -> AuditRecord:
    from dataclasses import replace
    return replace(r, **kw)


# ---------------------------------------------------------------------------
# replay throughput self-test

def synthetic_records(n: int, width: int = 1_000_000, batches_per_window: int = 10) -> tuple[PipelineDecl, list[AuditRecord]]:
    """A well-formed WinSum-style record stream of roughly ``n`` records."""
    decl = (PipelineDecl().add("in", "ingress").add("w", "window", width=width)
            .add("g", "groupby").add("a", "aggregate", kind="sum").add("out", "egress")
            .connect("in", "w", "g", "a", "out"))
    recs: list[AuditRecord] = []
    nid = 1
    ts = 0
    w = 0
    while len(recs) < n:
        finals = []
        for _ in range(batches_per_window):
            b, c, s = nid, nid + 1, nid + 2
            nid += 3
            recs.append(AuditRecord(ts, RecordKind.INGRESS, None, (), (b,), count=100))
            recs.append(AuditRecord(ts + 1, RecordKind.WND, PrimitiveId.SEGMENT, (b,), (c,), window_no=w, count=100))
            recs.append(AuditRecord(ts + 2, RecordKind.EXEC, PrimitiveId.SORT, (c,), (s,), window_no=w, count=100))
            finals.append(s)
            ts += 3
        wm, res = nid, nid + 1
        nid += 2
        recs.append(AuditRecord(ts, RecordKind.INGRESS, None, (), (wm,), watermark_value=(w + 1) * width))
        recs.append(AuditRecord(ts + 5, RecordKind.EXEC, PrimitiveId.AGG_SUM, tuple(finals) + (wm,), (res,),
                                window_no=w, count=10))
        recs.append(AuditRecord(ts + 6, RecordKind.EGRESS, None, (res,), (), window_no=w, count=10))
        ts += 7
        w += 1
    return decl, recs[:n] if n and len(recs) > n else recs


def replay_throughput_selftest(n: int = 100_000) -> float:
    """Records replayed per second, single-threaded. Returns 0 for an empty stream."""
    if n <= 0:
        return 0.0
    decl, recs = synthetic_records(n)
    plan = compile_plan(decl)
    t0 = time.perf_counter()
    verify_records(recs, plan, final=False)
    dt = time.perf_counter() - t0
    return len(recs) / dt if dt > 0 else float("inf")
