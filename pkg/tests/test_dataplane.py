import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from teestream.audit import RecordKind
from teestream.dataplane import DataPlane, GateConfig, GateRequest, RefTable
from teestream.errors import AuthFail, LifecycleViolation, ParamInvalid, RefInvalid, RejectedInput
from teestream.iogateway import (
    DEFAULT_EGRESS_KEY,
    DEFAULT_INGRESS_KEY,
    IngestPath,
    decode_result,
    end_frame,
    events_frame,
    watermark_frame,
)
from teestream.memory import After, Allocator, ArrayKind, Parallel
from teestream.model import AGG_DTYPE, PrimitiveId

import oracles as O

SEC = 1_000_000


class Gate:
    """A data plane with cleartext ingress, a counting clock and kept records."""

    def __init__(self, **kw):
        tick = itertools.count(1)
        cfg = dict(fields=(3,), batch_size=4, ingress_key=None, keep_records=True, clock=lambda: next(tick))
        cfg.update(kw)
        self.cfg = GateConfig(**cfg)
        self.dp = DataPlane()
        self.dp.init(self.cfg)
        self.key = self.cfg.ingress_key

    @property
    def records(self):
        return self.dp.audit.history

    def call(self, prim, inputs=(), hints=(), **params):
        return self.dp.invoke(GateRequest(prim, tuple(inputs), params, tuple(hints)))

    def ingest(self, frame):
        return self.dp.invoke(GateRequest(PrimitiveId.INGEST, payload=frame))

    def events(self, rows, port=0):
        return self.ingest(events_frame(O.to_array(rows), port, self.key))

    def watermark(self, value):
        return self.ingest(watermark_frame(value, 0, self.key))

    def content(self, token):
        entry = self.dp.refs.lookup(token)
        return O.as_tuples(self.dp.alloc.read(entry.array))

    def batch(self, rows):
        """Ingest ``rows`` as one sealed batch and return its token."""
        resp = self.events(rows)
        if not resp.outputs:
            resp = self.ingest(end_frame(0, self.key))
        (tok,) = resp.outputs
        return tok


class TestGateEntries:
    def test_double_init(self):
        g = Gate()
        with pytest.raises(LifecycleViolation):
            g.dp.init(g.cfg)

    def test_invoke_before_init(self):
        with pytest.raises(LifecycleViolation):
            DataPlane().invoke(GateRequest(PrimitiveId.SORT, (1,)))

    def test_finalize_returns_counters(self):
        g = Gate()
        g.events([(1, 1, 1)])
        out = g.dp.finalize()
        assert out["ingested_events"] == 1 and out["late_batches"] == 1
        with pytest.raises(LifecycleViolation):
            g.dp.debug_dump()

    def test_debug_dump_is_counters_only(self):
        g = Gate()
        g.batch([(1, 1, 1)] * 4)
        dump = g.dp.debug_dump()
        assert all(isinstance(v, int) for v in dump.values())


class TestRefs:
    def test_fabricated_token(self):
        g = Gate()
        with pytest.raises(RefInvalid):
            g.call(PrimitiveId.SORT, [0xDEADBEEF])
        assert g.records[-1].kind == RecordKind.REJECT
        assert g.records[-1].op == PrimitiveId.SORT
        assert g.dp.debug_dump()["rejected"] == 1

    @settings(max_examples=200)
    @given(st.integers(0, 2**64 - 1))
    def test_any_dead_token_rejected(self, token):
        g = Gate()
        live = g.batch([(1, 1, 1)] * 4)
        if token == live:
            return
        with pytest.raises(RefInvalid):
            g.call(PrimitiveId.SEGMENT, [token], width=SEC)

    def test_consecutive_tokens_distinct(self):
        a = Allocator()
        t = RefTable()
        ua = a.create(ArrayKind.STATE, 4)
        assert t.issue(ua) != t.issue(ua)

    def test_forced_collision_redraws(self):
        draws = iter([7, 7, 9])
        t = RefTable(draw=lambda: next(draws))
        ua = Allocator().create(ArrayKind.STATE, 4)
        assert t.issue(ua) == 7
        assert t.issue(ua) == 9
        assert t.collisions == 1 and len(t) == 2

    def test_retired_token_never_reissued(self):
        draws = iter([5, 5, 6])
        t = RefTable(draw=lambda: next(draws))
        ua = Allocator().create(ArrayKind.STATE, 4)
        tok = t.issue(ua)
        t.retire(tok)
        with pytest.raises(RefInvalid):
            t.lookup(tok)
        assert t.issue(ua) == 6

    def test_consumed_token_is_gone(self):
        g = Gate()
        tok = g.batch([(1, 1, 1)] * 4)
        g.call(PrimitiveId.SEGMENT, [tok], width=SEC)
        with pytest.raises(RefInvalid):
            g.call(PrimitiveId.SEGMENT, [tok], width=SEC)

    def test_same_token_twice(self):
        g = Gate()
        tok = g.batch([(1, 1, 1)] * 4)
        with pytest.raises((ParamInvalid, RefInvalid)):
            g.call(PrimitiveId.MERGE, [tok, tok], window=0)


class TestPrimitivesThroughGate:
    def test_segment_two_windows(self):
        g = Gate()
        tok = g.batch([(200_000, 1, 1), (1_500_000, 2, 2)])
        resp = g.call(PrimitiveId.SEGMENT, [tok], width=SEC)
        assert resp.tags == (0, 1) and len(resp.outputs) == 2
        wnd = [r for r in g.records if r.kind == RecordKind.WND]
        assert [r.window_no for r in wnd] == [0, 1]
        assert [r.outputs for r in wnd] == [(g.dp.refs.lookup(t).audit_id,) for t in resp.outputs]

    def test_sort(self):
        g = Gate()
        tok = g.batch([(0, 3, 9), (1, 1, 7), (2, 2, 8)])
        (chunk,) = g.call(PrimitiveId.SEGMENT, [tok], width=SEC).outputs
        (out,) = g.call(PrimitiveId.SORT, [chunk]).outputs
        assert [(r[1], r[2]) for r in g.content(out)] == [(1, 7), (2, 8), (3, 9)]

    def test_exec_record_matches_refs(self):
        g = Gate()
        tok = g.batch([(0, 3, 9), (1, 1, 7)])
        (chunk,) = g.call(PrimitiveId.SEGMENT, [tok], width=SEC).outputs
        cid = g.dp.refs.lookup(chunk).audit_id
        n = len(g.records)
        (out,) = g.call(PrimitiveId.SORT, [chunk]).outputs
        assert len(g.records) == n + 1
        r = g.records[-1]
        assert r.kind == RecordKind.EXEC and r.inputs == (cid,)
        assert r.outputs == (g.dp.refs.lookup(out).audit_id,) and r.count == 2

    def test_sort_needs_chunk(self):
        g = Gate()
        tok = g.batch([(1, 1, 1)] * 4)
        with pytest.raises(ParamInvalid):
            g.call(PrimitiveId.SORT, [tok])
        assert tok in g.dp.refs  # rejected inputs are handed back

    def test_filter_band_inverted(self):
        g = Gate()
        tok = g.batch([(1, 1, 1)] * 4)
        (chunk,) = g.call(PrimitiveId.SEGMENT, [tok], width=SEC).outputs
        with pytest.raises(ParamInvalid):
            g.call(PrimitiveId.FILTER_BAND, [chunk], lo=5, hi=1)
        assert chunk in g.dp.refs

    def _window0(self, g, rows, sort=True):
        tok = g.batch(rows)
        (chunk,) = g.call(PrimitiveId.SEGMENT, [tok], width=SEC).outputs
        if sort:
            (chunk,) = g.call(PrimitiveId.SORT, [chunk]).outputs
        wm = g.watermark(SEC).outputs[-1]
        return chunk, wm

    def test_close_and_egress(self):
        g = Gate()
        rows = [(1, 2, 10), (2, 1, 5), (3, 2, 1), (4, 1, 1)]
        chunk, wm = self._window0(g, rows)
        resp = g.call(PrimitiveId.AGG_SUM, [chunk, wm], window=0, grouped=True)
        (res,) = resp.outputs
        eg = g.call(PrimitiveId.EGRESS, [res], window=0)
        window, data = decode_result(eg.info["frame"], DEFAULT_EGRESS_KEY)
        out = np.frombuffer(data, dtype=AGG_DTYPE)
        assert window == 0 and [(int(r["key"]), int(r["sum"])) for r in out] == [(1, 6), (2, 11)]
        assert g.records[-1].kind == RecordKind.EGRESS and g.dp.audit.blocks >= 1

    def test_tampered_result_frame(self):
        g = Gate()
        chunk, wm = self._window0(g, [(1, 2, 10)] * 4)
        (res,) = g.call(PrimitiveId.AGG_COUNT, [chunk, wm], window=0, grouped=True).outputs
        frame = bytearray(g.call(PrimitiveId.EGRESS, [res], window=0).info["frame"])
        frame[-1] ^= 1
        with pytest.raises(AuthFail):
            decode_result(bytes(frame), DEFAULT_EGRESS_KEY)

    def test_close_window_mismatch(self):
        g = Gate()
        chunk, wm = self._window0(g, [(1, 2, 10)] * 4)
        with pytest.raises(ParamInvalid):
            g.call(PrimitiveId.AGG_SUM, [chunk, wm], window=1, grouped=True)
        assert chunk in g.dp.refs

    def test_close_without_completing_watermark(self):
        g = Gate()
        tok = g.batch([(1, 2, 10)] * 4)
        (chunk,) = g.call(PrimitiveId.SEGMENT, [tok], width=SEC).outputs
        wm = g.watermark(SEC // 2).outputs[-1]
        with pytest.raises(ParamInvalid):
            g.call(PrimitiveId.AGG_SUM, [chunk, wm], window=0)

    def test_egress_needs_result(self):
        g = Gate()
        tok = g.batch([(1, 2, 10)] * 4)
        with pytest.raises(ParamInvalid):
            g.call(PrimitiveId.EGRESS, [tok], window=0)

    def test_not_invocable(self):
        g = Gate()
        tok = g.batch([(1, 2, 10)] * 4)
        with pytest.raises(ParamInvalid):
            g.call(PrimitiveId.INGEST, [tok])

    def test_outputs_are_opaque(self):
        g = Gate()
        chunk, wm = self._window0(g, [(1, 2, 10)] * 4)
        resp = g.call(PrimitiveId.AGG_SUM, [chunk, wm], window=0, grouped=True)
        for v in resp.outputs + resp.tags + tuple(resp.info.values()):
            assert isinstance(v, int)


class TestIngest:
    def test_full_batch_sealed(self):
        g = Gate(batch_size=100_000)
        ev = np.zeros(100_000, dtype=O.to_array([]).dtype)
        resp = g.ingest(events_frame(ev))
        (tok,) = resp.outputs
        assert g.dp.refs.lookup(tok).array.length == 100_000
        assert resp.tags[0][:2] == ("batch", 0) and resp.tags[0][3] == 100_000
        assert g.records[-1].count == 100_000

    def test_watermark_record(self):
        g = Gate()
        g.watermark(100)
        r = g.records[-1]
        assert r.kind == RecordKind.INGRESS and r.watermark_value == 100

    def test_watermark_seals_partial_batch(self):
        g = Gate()
        g.events([(1, 1, 1)])
        resp = g.watermark(100)
        assert [t[0] for t in resp.tags] == ["batch", "wm"]

    def test_watermark_must_advance(self):
        g = Gate()
        g.watermark(100)
        with pytest.raises(RejectedInput):
            g.watermark(100)

    def test_encrypted_ingress(self):
        g = Gate(ingress_key=DEFAULT_INGRESS_KEY)
        tok = g.batch([(1, 1, 1)] * 4)
        assert g.content(tok) == [(1, 1, 1)] * 4

    def test_cleartext_refused_when_key_required(self):
        g = Gate(ingress_key=DEFAULT_INGRESS_KEY)
        with pytest.raises(RejectedInput):
            g.ingest(events_frame(O.to_array([(1, 1, 1)])))

    def test_flipped_ciphertext(self):
        g = Gate(ingress_key=DEFAULT_INGRESS_KEY)
        frame = bytearray(events_frame(O.to_array([(1, 1, 1)]), 0, DEFAULT_INGRESS_KEY))
        frame[20] ^= 4
        with pytest.raises(AuthFail):
            g.ingest(bytes(frame))
        assert g.records[-1].kind == RecordKind.REJECT
        assert g.dp.debug_dump()["ingested_events"] == 0

    def test_partial_event(self):
        g = Gate()
        from teestream.iogateway import FrameKind, encode_frame

        with pytest.raises(RejectedInput):
            g.ingest(encode_frame(FrameKind.EVENTS, b"\x00" * 13))

    def test_unknown_port(self):
        g = Gate()
        with pytest.raises(RejectedInput):
            g.events([(1, 1, 1)], port=3)

    def test_via_os_copies(self):
        direct, via = Gate(), Gate(ingest_path=IngestPath.VIA_OS)
        for g in (direct, via):
            g.batch([(1, 1, 1)] * 4)
        assert direct.dp.debug_dump()["bytes_copied"] == 0
        assert via.dp.debug_dump()["bytes_copied"] > 4 * 12

    def test_late_events_dropped_and_audited(self):
        g = Gate()
        g.watermark(SEC)
        tok = g.batch([(5, 1, 1), (SEC + 5, 1, 1)])
        resp = g.call(PrimitiveId.SEGMENT, [tok], width=SEC)
        assert resp.info["dropped"] == 1 and resp.tags == (1,)
        assert g.records[-1].kind == RecordKind.DROP and g.records[-1].count == 1


class TestVariants:
    def _run(self, **kw):
        g = Gate(**kw)
        rows = [(i * 1000, i % 3, i) for i in range(8)]
        tok = g.batch(rows[:4])
        tok2 = g.batch(rows[4:])
        outs = []
        for t in (tok, tok2):
            (c,) = g.call(PrimitiveId.SEGMENT, [t], width=SEC).outputs
            (c,) = g.call(PrimitiveId.SORT, [c]).outputs
            outs.append(c)
        wm = g.watermark(SEC).outputs[-1]
        (res,) = g.call(PrimitiveId.TOPK, outs + [wm], window=0, k=1).outputs
        frame = g.call(PrimitiveId.EGRESS, [res], window=0).info["frame"]
        key = DEFAULT_EGRESS_KEY if g.cfg.secure else None
        return g, decode_result(frame, key)[1]

    def test_insecure_emits_no_records_same_result(self):
        secure, a = self._run()
        insecure, b = self._run(secure=False)
        assert a == b
        assert secure.records and not insecure.records

    def test_strict_gate_same_result(self):
        _, a = self._run()
        _, b = self._run(strict_gate=True)
        assert a == b

    def test_hints_do_not_change_results(self):
        g = Gate()
        t1 = g.batch([(1, 1, 1)] * 4)
        (c1,) = g.call(PrimitiveId.SEGMENT, [t1], hints=[Parallel(4)], width=SEC).outputs
        t2 = g.batch([(2, 1, 1)] * 4)
        (c2,) = g.call(PrimitiveId.SEGMENT, [t2], hints=[After(c1)], width=SEC).outputs
        assert g.content(c1) == [(1, 1, 1)] * 4 and g.content(c2) == [(2, 1, 1)] * 4
        assert g.records[-1].hint_digest is not None

    def test_stale_hint_ignored(self):
        g = Gate()
        t1 = g.batch([(1, 1, 1)] * 4)
        (c1,) = g.call(PrimitiveId.SEGMENT, [t1], hints=[After(0xDEAD)], width=SEC).outputs
        assert g.records[-1].hint_digest is None

    def test_unknown_hint_type(self):
        g = Gate()
        t1 = g.batch([(1, 1, 1)] * 4)
        with pytest.raises(ParamInvalid):
            g.call(PrimitiveId.SEGMENT, [t1], hints=["soon"], width=SEC)
