import pytest
from hypothesis import given, strategies as st

from teestream.errors import ParamInvalid, RejectedInput
from teestream.model import (
    Event,
    PipelineDecl,
    PrimitiveId,
    WindowSpec,
    assign_window,
    compile_plan,
    decode_events,
    encode_events,
    format_pipeline,
    parse_pipeline,
    pipeline_validate,
    selectivity_band,
)

from conftest import house_pipeline

SECOND = 1_000_000
times = st.integers(0, 2**32 - 1)
i32 = st.integers(-(2**31), 2**31 - 1)


class TestAssignWindow:
    @pytest.mark.parametrize("t,expect", [(0, 0), (1_500_000, 1), (999_999, 0), (1_000_000, 1)])
    def test_examples(self, t, expect):
        assert assign_window(t, WindowSpec(SECOND)) == expect

    def test_negative_time_rejected(self):
        with pytest.raises(RejectedInput):
            assign_window(-1, WindowSpec(SECOND))

    def test_width_must_be_positive(self):
        with pytest.raises(ParamInvalid):
            WindowSpec(0)

    @given(times, times, st.integers(1, 10**7))
    def test_monotone(self, a, b, width):
        a, b = min(a, b), max(a, b)
        spec = WindowSpec(width)
        assert assign_window(a, spec) <= assign_window(b, spec)

    @given(times, st.integers(1, 10**6), st.integers(1, 4000))
    def test_events_before_aligned_watermark_are_in_earlier_windows(self, t, width, k):
        wm = k * width
        if t < wm:
            assert assign_window(t, WindowSpec(width)) < assign_window(wm, WindowSpec(width))

    def test_half_open_bounds(self):
        spec = WindowSpec(100)
        lo, hi = spec.bounds(3)
        assert assign_window(lo, spec) == 3 and assign_window(hi - 1, spec) == 3
        assert assign_window(hi, spec) == 4


class TestEvents:
    def test_sizes(self):
        assert len(encode_events([Event(1, 2, 3)], 3)) == 12
        assert len(encode_events([Event(1, 2, 3, 4)], 4)) == 16

    @given(st.lists(st.tuples(times, i32, i32), max_size=50))
    def test_roundtrip_three_fields(self, rows):
        evs = [Event(*r) for r in rows]
        assert decode_events(encode_events(evs, 3), 3) == evs

    @given(st.lists(st.tuples(times, i32, i32, i32), max_size=50))
    def test_roundtrip_four_fields(self, rows):
        evs = [Event(*r) for r in rows]
        assert decode_events(encode_events(evs, 4), 4) == evs

    def test_negative_event_time(self):
        with pytest.raises(RejectedInput):
            encode_events([Event(-5, 0, 0)])


class TestValidate:
    def test_house_pipeline_is_valid(self):
        assert pipeline_validate(house_pipeline()) == []

    def test_cycle(self):
        d = house_pipeline()
        d.connect("out", "in")
        kinds = {v.kind for v in pipeline_validate(d)}
        assert "cycle" in kinds

    def test_topk_zero(self):
        d = (PipelineDecl().add("in", "ingress").add("w", "window", width=SECOND)
             .add("g", "groupby").add("t", "topk", k=0).add("out", "egress")
             .connect("in", "w", "g", "t", "out"))
        assert [v.kind for v in pipeline_validate(d)] == ["parameter"]

    def test_zero_width(self):
        d = house_pipeline(width=0)
        assert any(v.kind == "parameter" and v.node == "w" for v in pipeline_validate(d))

    def test_missing_ingress_and_egress(self):
        d = PipelineDecl().add("w", "window", width=5)
        kinds = {v.kind for v in pipeline_validate(d)}
        assert {"missing_ingress", "missing_egress"} <= kinds

    def test_unreachable(self):
        d = house_pipeline().add("lonely", "groupby")
        assert any(v.kind == "unreachable" and v.node == "lonely" for v in pipeline_validate(d))

    def test_two_egresses(self):
        d = house_pipeline().add("out2", "egress").connect("ag", "out2")
        assert any(v.kind == "missing_egress" for v in pipeline_validate(d))


class TestPlan:
    def test_house_pipeline_plan(self):
        plan = compile_plan(house_pipeline())
        assert plan.width == SECOND
        assert [s.prim for s in plan.streaming[0]] == [PrimitiveId.SEGMENT, PrimitiveId.SORT]
        assert [s.prim for s in plan.close] == [PrimitiveId.AGG_AVG]
        assert plan.close[0].param("grouped") is True

    def test_ungrouped_aggregate(self):
        d = (PipelineDecl().add("in", "ingress").add("w", "window", width=10)
             .add("a", "aggregate", kind="sum").add("out", "egress").connect("in", "w", "a", "out"))
        plan = compile_plan(d)
        assert plan.close[0].param("grouped") is False

    def test_window_only_pipeline_concatenates(self):
        d = (PipelineDecl().add("in", "ingress").add("w", "window", width=10)
             .add("out", "egress").connect("in", "w", "out"))
        assert [s.prim for s in compile_plan(d).close] == [PrimitiveId.CONCAT]

    def test_topk_needs_groupby(self):
        d = (PipelineDecl().add("in", "ingress").add("w", "window", width=10)
             .add("t", "topk", k=2).add("out", "egress").connect("in", "w", "t", "out"))
        with pytest.raises(ParamInvalid):
            compile_plan(d)

    def test_invalid_decl_raises(self):
        with pytest.raises(ParamInvalid):
            compile_plan(house_pipeline(width=-1))


class TestTextFormat:
    TEXT = """
    # per-house averages
    ingress in
    window w width=1s
    groupby gb
    aggregate ag kind=avg
    egress out
    connect in -> w -> gb -> ag -> out
    """

    def test_parse(self):
        d = parse_pipeline(self.TEXT)
        assert d.node("w").params == {"width": SECOND}
        assert d.edges == house_pipeline().edges
        assert pipeline_validate(d) == []

    def test_units(self):
        d = parse_pipeline("ingress i\nwindow w width=250ms\negress o\nconnect i -> w -> o")
        assert d.node("w").params["width"] == 250_000

    def test_selectivity_shorthand(self):
        d = parse_pipeline("filter f selectivity=0.01")
        lo, hi = selectivity_band(0.01)
        assert d.node("f").params == {"lo": lo, "hi": hi}

    def test_format_roundtrip(self):
        d = house_pipeline()
        again = parse_pipeline(format_pipeline(d))
        assert again.nodes == d.nodes and again.edges == d.edges

    @pytest.mark.parametrize("bad", ["window", "connect a", "window w width"])
    def test_malformed_lines(self, bad):
        with pytest.raises(ParamInvalid):
            parse_pipeline(bad)


class TestSelectivityBand:
    def test_one_percent_span(self):
        lo, hi = selectivity_band(0.01)
        assert abs((hi - lo + 1) / 2**32 - 0.01) < 1e-9

    def test_full_domain(self):
        assert selectivity_band(1.0) == (-(2**31), 2**31 - 1)

    @pytest.mark.parametrize("f", [0, -0.1, 1.5])
    def test_out_of_range(self, f):
        with pytest.raises(ParamInvalid):
            selectivity_band(f)
