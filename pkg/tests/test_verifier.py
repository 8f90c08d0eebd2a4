import random

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from teestream.audit import AuditRecord, RecordKind, parse_records
from teestream.bench import BENCHMARKS, generate_events
from teestream.codec import BlockCodec
from teestream.control import EngineConfig, run_pipeline
from teestream.errors import VerificationRefused
from teestream.model import PrimitiveId
from teestream.verifier import (
    MUTATIONS,
    decode_blocks,
    mutate,
    replay_throughput_selftest,
    synthetic_records,
    verify_correctness,
    verify_freshness,
    verify_records,
)

from conftest import SAMPLE_TRACE, house_pipeline

SMALL = 2000


def engine_run(name, windows=3, **kw):
    spec = BENCHMARKS[name].scaled(SMALL)
    wl = generate_events(spec, windows * SMALL, seed=11)
    blocks = []
    cfg = EngineConfig(batch_size=500, audit_sink=blocks.append, **kw)
    rep = run_pipeline(spec.decl(), cfg, list(wl.frames(cfg.ingress_key, frame_events=700)))
    return spec.decl(), rep, blocks


@pytest.fixture(scope="module")
def streams():
    out = {}
    for name in sorted(BENCHMARKS):
        decl, _, blocks = engine_run(name, windows=2)
        out[name] = (decl, decode_blocks(blocks)[0])
    return out


class TestSampleTrace:
    def test_passes_with_window_one_pending(self, sample_trace, sum_pipeline_100):
        v = verify_records(parse_records(sample_trace), sum_pipeline_100)
        assert v.correct and v.pending_windows == (1,)

    def test_delay(self, sample_trace, sum_pipeline_100):
        v = verify_records(parse_records(sample_trace), sum_pipeline_100)
        assert [(d.result, d.watermark, d.delay_us) for d in v.delays] == [(0xF5, 0xF4, 15)]

    def test_missing_sort(self, sample_trace, sum_pipeline_100):
        text = sample_trace.replace("ts=10 SORT data_in=0xF1 data_out=0xF3\n", "")
        v = verify_records(parse_records(text), sum_pipeline_100)
        assert not v.correct
        assert v.violation.kind == "unprocessed" and "0xF1" in v.violation.detail

    def test_unknown_id(self, sample_trace, sum_pipeline_100):
        text = sample_trace.replace("data_in=0xF3,0xF4", "data_in=0xAA,0xF4")
        v = verify_records(parse_records(text), sum_pipeline_100)
        assert v.violation.kind == "unknown_id" and "0xAA" in v.violation.detail

    def test_wrong_aggregate(self, sample_trace):
        v = verify_records(parse_records(sample_trace), house_pipeline(100, "count"))
        assert v.violation.kind == "wrong_primitive"

    def test_missing_egress(self, sample_trace, sum_pipeline_100):
        text = sample_trace.replace("ts=30 EGRESS data=0xF5\n", "")
        assert not verify_records(parse_records(text), sum_pipeline_100).correct
        assert verify_records(parse_records(text), sum_pipeline_100, final=False).correct

    def test_egress_at_watermark_time(self, sample_trace, sum_pipeline_100):
        text = sample_trace.replace("ts=25 SUM", "ts=15 SUM").replace("ts=30 EGRESS", "ts=15 EGRESS")
        v = verify_records(parse_records(text), sum_pipeline_100)
        assert v.delay_of(0) == 0

    def test_early_close(self, sum_pipeline_100):
        text = SAMPLE_TRACE.replace("(watermark=100)", "(watermark=50)")
        v = verify_records(parse_records(text), sum_pipeline_100)
        assert v.violation.kind == "early_close"


class TestEngineStreams:
    @pytest.mark.parametrize("name", sorted(BENCHMARKS))
    def test_unmutated_pass(self, streams, name):
        decl, recs = streams[name]
        v = verify_records(recs, decl)
        assert v.correct, v.violation
        assert v.fresh and v.pending_windows == ()

    @settings(max_examples=120, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.sampled_from(sorted(BENCHMARKS)), st.sampled_from(MUTATIONS), st.integers(0, 2**32))
    def test_mutations_fail(self, streams, name, how, seed):
        decl, recs = streams[name]
        bad, what = mutate(recs, how, random.Random(seed))
        assert not verify_records(bad, decl).correct, what

    def test_freshness_matches_engine(self):
        decl, rep, blocks = engine_run("WinSum")
        delays = {d.window: d.delay_us for d in verify_freshness(blocks, decl)}
        assert delays == rep.delays_us

    def test_threaded_stream_passes(self):
        decl, rep, blocks = engine_run("TopK", workers=4)
        assert verify_correctness(blocks, decl).correct

    def test_prefix_is_partial_pass(self):
        decl, _, blocks = engine_run("WinSum")
        recs, _ = decode_blocks(blocks)
        cut = recs[: len(recs) // 2]
        assert verify_records(cut, decl, final=False).correct

    def test_encrypted_blocks(self):
        decl, _, blocks = engine_run("WinSum", audit_encrypt=True)
        assert verify_correctness(blocks, decl, codec=BlockCodec(encrypt=True)).correct
        with pytest.raises(VerificationRefused):
            verify_correctness(blocks, decl, codec=BlockCodec(encrypt=True, enc_key=bytes(16)))

    def test_wrong_mac_key_refused(self):
        decl, _, blocks = engine_run("WinSum")
        with pytest.raises(VerificationRefused):
            verify_correctness(blocks, decl, codec=BlockCodec(mac_key=b"k" * 32))

    def test_tampered_block_refused(self):
        decl, _, blocks = engine_run("WinSum")
        blocks[1] = blocks[1][:20] + bytes([blocks[1][20] ^ 1]) + blocks[1][21:]
        with pytest.raises(VerificationRefused):
            verify_correctness(blocks, decl)


class TestDeterminism:
    def test_replay_twice_same_verdict(self, streams):
        decl, recs = streams["WinSum"]
        a, b = verify_records(recs, decl), verify_records(recs, decl)
        assert (a.correct, a.pending_windows, a.delays) == (b.correct, b.pending_windows, b.delays)

    def test_doubled_stream(self, streams):
        decl, recs = streams["WinSum"]
        a = verify_records(recs + recs, decl)
        b = verify_records(recs + recs, decl)
        assert not a.correct and a.violation == b.violation


class TestFreshness:
    def test_unattributable(self):
        recs = [
            AuditRecord(0, RecordKind.INGRESS, None, (), (1,), count=1),
            AuditRecord(1, RecordKind.WND, PrimitiveId.SEGMENT, (1,), (2,), window_no=0, count=1),
            AuditRecord(2, RecordKind.EXEC, PrimitiveId.SORT, (2,), (3,), count=1),
            AuditRecord(3, RecordKind.EXEC, PrimitiveId.AGG_SUM, (3,), (4,), window_no=0),
            AuditRecord(4, RecordKind.EGRESS, None, (4,), ()),
        ]
        v = verify_records(recs, house_pipeline(kind="sum"), final=False)
        assert not v.correct
        assert [d.result for d in v.unattributable] == [4] and not v.fresh


class TestSelftest:
    def test_rate(self):
        assert replay_throughput_selftest(100_000) > 10_000

    def test_empty(self):
        assert replay_throughput_selftest(0) == 0

    def test_synthetic_stream_is_valid(self):
        decl, recs = synthetic_records(3000)
        assert verify_records(recs, decl, final=False).correct
