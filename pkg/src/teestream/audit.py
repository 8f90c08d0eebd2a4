"""Audit records produced at the gate boundary, and the buffered log that flushes them.

Row layout of one record (little-endian, "raw" form; see README "Audit record layout")::

    u8      header   bits 0-2 kind, 3 window?, 4 count?, 5 watermark?, 6 hint?, 7 op?
    varint  ts
    u8      op                 (if bit 7)
    varint  port               (INGRESS records only)
    varint  n_in,  n_in  x varint id
    varint  n_out, n_out x varint id
    varint  window_no          (if bit 3)
    varint  count              (if bit 4)
    varint  watermark_value    (if bit 5)
    u32     hint_digest        (if bit 6)
"""

from __future__ import annotations

import enum
import re
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .errors import Corrupt
from .model import PrimitiveId


class RecordKind(enum.IntEnum):
    INGRESS = 0
    EGRESS = 1
    EXEC = 2
    WND = 3
    DROP = 4
    REJECT = 5


@dataclass(frozen=True)
class AuditRecord:
    ts: int
    kind: RecordKind
    op: PrimitiveId | None = None
    inputs: tuple[int, ...] = ()
    outputs: tuple[int, ...] = ()
    window_no: int | None = None
    count: int | None = None
    watermark_value: int | None = None
    hint_digest: int | None = None
    port: int = 0


def hint_digest(hints: Iterable, base: int) -> int | None:
    """CRC-32 over a canonical rendering of resolved hints.

    An After target is written as its distance below ``base``, the audit id of
    the record's first output, so steady chains repeat the same digest.
    """
    parts = []
    for h in hints:
        if h[0] == "after":
            parts.append(f"A:{base - h[1]}")
        else:
            parts.append(f"P:{h[1]}")
    if not parts:
        return None
    return zlib.crc32(";".join(parts).encode())


# ---------------------------------------------------------------------------
# row layout

def _varint(out: bytearray, v: int) -> None:
    if v < 0:
        raise ValueError("varint fields are unsigned")
    while v >= 0x80:
        out.append((v & 0x7F) | 0x80)
        v >>= 7
    out.append(v)


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    v = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise Corrupt("truncated varint")
        b = buf[pos]
        pos += 1
        v |= (b & 0x7F) << shift
        if b < 0x80:
            return v, pos
        shift += 7
        if shift > 63:
            raise Corrupt("varint overflow")


def encode_row(r: AuditRecord) -> bytes:
    out = bytearray()
    header = int(r.kind)
    header |= (r.window_no is not None) << 3
    header |= (r.count is not None) << 4
    header |= (r.watermark_value is not None) << 5
    header |= (r.hint_digest is not None) << 6
    header |= (r.op is not None) << 7
    out.append(header)
    _varint(out, r.ts)
    if r.op is not None:
        out.append(int(r.op))
    if r.kind == RecordKind.INGRESS:
        _varint(out, r.port)
    _varint(out, len(r.inputs))
    for i in r.inputs:
        _varint(out, i)
    _varint(out, len(r.outputs))
    for o in r.outputs:
        _varint(out, o)
    if r.window_no is not None:
        _varint(out, r.window_no)
    if r.count is not None:
        _varint(out, r.count)
    if r.watermark_value is not None:
        _varint(out, r.watermark_value)
    if r.hint_digest is not None:
        out += struct.pack("<I", r.hint_digest)
    return bytes(out)


def encode_rows(records: Iterable[AuditRecord]) -> bytes:
    return b"".join(encode_row(r) for r in records)


def decode_rows(buf: bytes) -> list[AuditRecord]:
    records = []
    pos = 0
    try:
        while pos < len(buf):
            header = buf[pos]
            pos += 1
            kind = RecordKind(header & 0x7)
            ts, pos = _read_varint(buf, pos)
            op = None
            if header & 0x80:
                op = PrimitiveId(buf[pos])
                pos += 1
            port = 0
            if kind == RecordKind.INGRESS:
                port, pos = _read_varint(buf, pos)
            n, pos = _read_varint(buf, pos)
            ins = []
            for _ in range(n):
                v, pos = _read_varint(buf, pos)
                ins.append(v)
            n, pos = _read_varint(buf, pos)
            outs = []
            for _ in range(n):
                v, pos = _read_varint(buf, pos)
                outs.append(v)
            opt = []
            for bit in (3, 4, 5):
                if header & (1 << bit):
                    v, pos = _read_varint(buf, pos)
                    opt.append(v)
                else:
                    opt.append(None)
            digest = None
            if header & 0x40:
                if pos + 4 > len(buf):
                    raise Corrupt("truncated hint digest")
                (digest,) = struct.unpack_from("<I", buf, pos)
                pos += 4
            records.append(AuditRecord(ts, kind, op, tuple(ins), tuple(outs),
                                       opt[0], opt[1], opt[2], digest, port))
    except (IndexError, ValueError) as exc:
        raise Corrupt(f"bad record row at byte {pos}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# compact text form, e.g. "ts=25 SUM data_in=0xF3,0xF4 data_out=0xF5"

OP_NAMES = {
    PrimitiveId.SORT: "SORT",
    PrimitiveId.MERGE: "MERGE",
    PrimitiveId.JOIN: "JOIN",
    PrimitiveId.AGG_SUM: "SUM",
    PrimitiveId.AGG_COUNT: "COUNT",
    PrimitiveId.AGG_AVG: "AVG",
    PrimitiveId.AGG_MEDIAN: "MEDIAN",
    PrimitiveId.AGG_SUMCNT: "SUMCNT",
    PrimitiveId.TOPK: "TOPK",
    PrimitiveId.UNIQUE: "UNIQUE",
    PrimitiveId.FILTER_BAND: "FILTER",
    PrimitiveId.CONCAT: "CONCAT",
    PrimitiveId.RANK: "RANK",
    PrimitiveId.SEGMENT: "SEGMENT",
    PrimitiveId.INGEST: "INGEST",
    PrimitiveId.EGRESS: "EGRESS",
}
OPS_BY_NAME = {v: k for k, v in OP_NAMES.items()}

_TOKEN = re.compile(r"(\w+)=\s*([^\s()]+)|\((\w+)=([^)]+)\)|([A-Z_]+)")


def _ids(text: str) -> tuple[int, ...]:
    if text == "-":
        return ()
    return tuple(int(x, 0) for x in text.split(",") if x)


def _hexs(ids: Iterable[int]) -> str:
    return ",".join(f"0x{i:X}" for i in ids) or "-"


def format_record(r: AuditRecord) -> str:
    parts = [f"ts={r.ts:>2}"]
    if r.kind == RecordKind.INGRESS:
        parts += ["INGRESS", f"data={_hexs(r.outputs)}"]
        if r.port:
            parts.append(f"port={r.port}")
        if r.watermark_value is not None:
            parts.append(f"(watermark={r.watermark_value})")
    elif r.kind == RecordKind.EGRESS:
        parts += ["EGRESS", f"data={_hexs(r.inputs)}"]
    elif r.kind == RecordKind.WND:
        parts += ["WND", f"data_in={_hexs(r.inputs)}"]
        if r.window_no is not None:
            parts.append(f"win_no={r.window_no}")
        parts.append(f"data_out={_hexs(r.outputs)}")
    elif r.kind == RecordKind.EXEC:
        parts += [OP_NAMES[r.op], f"data_in={_hexs(r.inputs)}", f"data_out={_hexs(r.outputs)}"]
    elif r.kind == RecordKind.DROP:
        parts += ["DROP", f"data_in={_hexs(r.inputs)}"]
    else:
        parts += ["REJECT"]
        if r.op is not None:
            parts.append(f"op={OP_NAMES[r.op]}")
    if r.kind not in (RecordKind.WND,) and r.window_no is not None:
        parts.append(f"win_no={r.window_no}")
    if r.count is not None:
        parts.append(f"cnt={r.count}")
    if r.hint_digest is not None:
        parts.append(f"hint=0x{r.hint_digest:08X}")
    return " ".join(parts)


def parse_record(line: str) -> AuditRecord:
    m = re.match(r"\s*ts=\s*(\d+)\s+(.*)$", line)
    if not m:
        raise Corrupt(f"not an audit record line: {line!r}")
    ts = int(m.group(1))
    fields = {}
    word = None
    for key, val, pkey, pval, bare in _TOKEN.findall(m.group(2)):
        if bare:
            word = word or bare
        elif key:
            fields[key] = val
        else:
            fields[pkey] = pval
    if word is None:
        raise Corrupt(f"no record kind in {line!r}")
    common = dict(
        window_no=int(fields["win_no"]) if "win_no" in fields else None,
        count=int(fields["cnt"]) if "cnt" in fields else None,
        hint_digest=int(fields["hint"], 0) if "hint" in fields else None,
    )
    if word == "INGRESS":
        wm = int(fields["watermark"]) if "watermark" in fields else None
        return AuditRecord(ts, RecordKind.INGRESS, outputs=_ids(fields.get("data", "-")),
                           watermark_value=wm, port=int(fields.get("port", 0)), **common)
    if word == "EGRESS":
        return AuditRecord(ts, RecordKind.EGRESS, inputs=_ids(fields.get("data", "-")), **common)
    if word == "WND":
        return AuditRecord(ts, RecordKind.WND, PrimitiveId.SEGMENT, _ids(fields.get("data_in", "-")),
                           _ids(fields.get("data_out", "-")), **common)
    if word == "DROP":
        return AuditRecord(ts, RecordKind.DROP, PrimitiveId.SEGMENT, _ids(fields.get("data_in", "-")), **common)
    if word == "REJECT":
        op = OPS_BY_NAME.get(fields.get("op", ""))
        return AuditRecord(ts, RecordKind.REJECT, op, **common)
    if word not in OPS_BY_NAME:
        raise Corrupt(f"unknown operation {word!r}")
    return AuditRecord(ts, RecordKind.EXEC, OPS_BY_NAME[word], _ids(fields.get("data_in", "")),
                       _ids(fields.get("data_out", "")), **common)


def parse_records(text: str) -> list[AuditRecord]:
    return [parse_record(line) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# buffered log

FLUSH_PERIOD_US = 1_000_000


@dataclass
class AuditLog:
    """Thread-safe append buffer; ``flush_block`` hands records to ``encoder``.

    Flushes happen when an EGRESS record is pending or ``period_us`` has passed
    since the previous flush.
    """

    encoder: Callable[[list[AuditRecord]], bytes]
    sink: Callable[[bytes], None] | None = None
    period_us: int = FLUSH_PERIOD_US
    keep_records: bool = False
    _buffer: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock)
    _flush_lock: threading.Lock = field(default_factory=threading.Lock)
    _seq: int = 0
    _last_flush: int = 0
    _egress_pending: bool = False
    history: list = field(default_factory=list)
    blocks: int = 0
    raw_bytes: int = 0
    block_bytes: int = 0
    encode_ns: int = 0

    def record_append(self, r: AuditRecord) -> int:
        with self._lock:
            seq = self._seq
            self._seq += 1
            self._buffer.append(r)
            if r.kind == RecordKind.EGRESS:
                self._egress_pending = True
            if self.keep_records:
                self.history.append(r)
            return seq

    @property
    def appended(self) -> int:
        return self._seq

    def due(self, now: int) -> bool:
        return self._egress_pending or now - self._last_flush >= self.period_us

    def flush_block(self, now: int, force: bool = False) -> bytes | None:
        import time

        with self._flush_lock:
            with self._lock:
                if not (force or self._egress_pending or now - self._last_flush >= self.period_us):
                    return None
                self._last_flush = now
                self._egress_pending = False
                records, self._buffer = self._buffer, []
            if not records:
                return None
            t0 = time.perf_counter_ns()
            block = self.encoder(records)
            self.encode_ns += time.perf_counter_ns() - t0
            self.blocks += 1
            self.block_bytes += len(block)
            self.raw_bytes += sum(len(encode_row(r)) for r in records)
            if self.sink is not None:
                self.sink(block)
            return block
