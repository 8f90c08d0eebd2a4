import pytest

from teestream.model import PipelineDecl

SAMPLE_TRACE = """\
ts= 1 INGRESS data=0xF0
ts= 5 WND data_in=0xF0 win_no=0 data_out=0xF1
ts=10 SORT data_in=0xF1 data_out=0xF3
ts=15 INGRESS data=0xF4 (watermark=100)
ts=25 SUM data_in=0xF3,0xF4 data_out=0xF5
ts=28 WND data_in=0xF0 win_no=1 data_out=0xF6
ts=30 EGRESS data=0xF5
"""


def house_pipeline(width: int = 1_000_000, kind: str = "avg") -> PipelineDecl:
    """Ingress -> Window -> GroupBy(house) -> Aggregation -> Egress."""
    return (
        PipelineDecl()
        .add("in", "ingress")
        .add("w", "window", width=width)
        .add("gb", "groupby")
        .add("ag", "aggregate", kind=kind)
        .add("out", "egress")
        .connect("in", "w", "gb", "ag", "out")
    )


@pytest.fixture
def sample_trace() -> str:
    return SAMPLE_TRACE


@pytest.fixture
def sum_pipeline_100() -> PipelineDecl:
    return house_pipeline(width=100, kind="sum")
