"""Stream model shared by the engine, the generators and the verifier.

Events travel as packed little-endian records: ``event_time`` (u32, microseconds),
``key`` (i32), ``value`` (i32) and, for 4-field layouts, ``extra`` (i32).
Windows are fixed and half-open: window ``k`` covers ``[k*width, (k+1)*width)``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ParamInvalid, RejectedInput

EVENT3 = np.dtype([("t", "<u4"), ("key", "<i4"), ("value", "<i4")])
EVENT4 = np.dtype([("t", "<u4"), ("key", "<i4"), ("value", "<i4"), ("extra", "<i4")])
WATERMARK_DTYPE = np.dtype([("value", "<u8")])

# close-stage output layouts
AGG_DTYPE = np.dtype(
    [("key", "<i4"), ("extra", "<i4"), ("count", "<i8"), ("sum", "<i8"),
     ("median", "<i4"), ("avg", "<f8")]
)
JOIN_DTYPE = np.dtype([("key", "<i4"), ("vleft", "<i4"), ("vright", "<i4")])
KEY_DTYPE = np.dtype([("key", "<i4")])
RANK_DTYPE = np.dtype([("house", "<i4"), ("plugs", "<i4")])

MAX_EVENT_TIME = 2**32 - 1


def event_dtype(fields: int) -> np.dtype:
    if fields == 3:
        return EVENT3
    if fields == 4:
        return EVENT4
    raise ParamInvalid(f"events have 3 or 4 fields, not {fields}")


class Event(NamedTuple):
    event_time: int
    key: int
    value: int
    extra: int | None = None


def encode_events(events: Iterable[Event], fields: int = 3) -> bytes:
    return events_to_array(events, fields).tobytes()


def events_to_array(events: Iterable[Event], fields: int = 3) -> np.ndarray:
    dtype = event_dtype(fields)
    rows = []
    for e in events:
        if e.event_time < 0:
            raise RejectedInput(f"negative event time {e.event_time}")
        if fields == 4:
            rows.append((e.event_time, e.key, e.value, 0 if e.extra is None else e.extra))
        else:
            rows.append((e.event_time, e.key, e.value))
    return np.array(rows, dtype=dtype)


def decode_events(payload: bytes, fields: int = 3) -> list[Event]:
    arr = np.frombuffer(payload, dtype=event_dtype(fields))
    if fields == 4:
        return [Event(int(r["t"]), int(r["key"]), int(r["value"]), int(r["extra"])) for r in arr]
    return [Event(int(r["t"]), int(r["key"]), int(r["value"])) for r in arr]


def sort_keys(events: np.ndarray) -> np.ndarray:
    """Composite uint64 key ordering events by (key, event_time)."""
    k = (events["key"].astype(np.int64) + 2**31).astype(np.uint64)
    return (k << np.uint64(32)) | events["t"].astype(np.uint64)


@dataclass(frozen=True)
class Watermark:
    value: int
    ingress_proc_time: int | None = None


@dataclass(frozen=True)
class WindowSpec:
    width: int

    def __post_init__(self):
        if self.width <= 0:
            raise ParamInvalid(f"window width must be positive, got {self.width}")

    def bounds(self, index: int) -> tuple[int, int]:
        return index * self.width, (index + 1) * self.width

    def closed_by(self, watermark: int) -> int:
        """Number of windows completed by ``watermark``: indices below it are closed."""
        return watermark // self.width


def assign_window(event_time: int, spec: WindowSpec) -> int:
    if event_time < 0:
        raise RejectedInput(f"negative event time {event_time}")
    return event_time // spec.width


class PrimitiveId(enum.IntEnum):
    SORT = 1
    MERGE = 2
    SEGMENT = 3
    JOIN = 4
    AGG_SUM = 5
    AGG_COUNT = 6
    AGG_AVG = 7
    AGG_MEDIAN = 8
    AGG_SUMCNT = 9
    TOPK = 10
    UNIQUE = 11
    FILTER_BAND = 12
    CONCAT = 13
    RANK = 14
    # gate-level IO operations; never appear as the op of an EXEC record
    INGEST = 20
    EGRESS = 21


AGG_KINDS = {
    "sum": PrimitiveId.AGG_SUM,
    "count": PrimitiveId.AGG_COUNT,
    "avg": PrimitiveId.AGG_AVG,
    "median": PrimitiveId.AGG_MEDIAN,
    "sumcnt": PrimitiveId.AGG_SUMCNT,
}


# ---------------------------------------------------------------------------
# pipeline declarations

OPERATORS = {
    "ingress", "window", "groupby", "aggregate", "join", "filter",
    "distinct", "topk", "rank", "egress",
}
STREAMING_OPS = {"window", "groupby", "filter"}
CLOSE_OPS = {"aggregate", "join", "distinct", "topk", "rank"}


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    params: dict = field(default_factory=dict, hash=False, compare=True)


@dataclass
class PipelineDecl:
    nodes: list[Node] = field(default_factory=list)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def add(self, name: str, op: str, **params) -> "PipelineDecl":
        self.nodes.append(Node(name, op, params))
        return self

    def connect(self, *names: str) -> "PipelineDecl":
        for a, b in zip(names, names[1:]):
            self.edges.append((a, b))
        return self

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def successors(self, name: str) -> list[str]:
        return [b for a, b in self.edges if a == name]

    def predecessors(self, name: str) -> list[str]:
        return [a for a, b in self.edges if b == name]


@dataclass(frozen=True)
class Violation:
    kind: str
    node: str | None
    detail: str

    def __str__(self) -> str:
        where = f" at {self.node}" if self.node else ""
        return f"{self.kind}{where}: {self.detail}"


def _check_params(node: Node) -> list[Violation]:
    out = []
    p = node.params
    if node.op == "window":
        width = p.get("width")
        if not isinstance(width, int) or width <= 0:
            out.append(Violation("parameter", node.name, f"window width must be > 0, got {width!r}"))
    elif node.op == "topk":
        k = p.get("k")
        if not isinstance(k, int) or k <= 0:
            out.append(Violation("parameter", node.name, f"k must be >= 1, got {k!r}"))
    elif node.op == "aggregate":
        if p.get("kind") not in AGG_KINDS:
            out.append(Violation("parameter", node.name, f"unknown aggregation kind {p.get('kind')!r}"))
    elif node.op == "filter":
        lo, hi = p.get("lo"), p.get("hi")
        if not isinstance(lo, int) or not isinstance(hi, int) or lo > hi:
            out.append(Violation("parameter", node.name, f"filter band [{lo}, {hi}] is invalid"))
    elif node.op == "ingress":
        if p.get("fields", 3) not in (3, 4):
            out.append(Violation("parameter", node.name, "ingress fields must be 3 or 4"))
    return out


def pipeline_validate(decl: PipelineDecl) -> list[Violation]:
    """Structural and parameter checks; an empty list means the declaration is valid."""
    violations: list[Violation] = []
    names = [n.name for n in decl.nodes]
    seen = set()
    for n in names:
        if n in seen:
            violations.append(Violation("duplicate", n, "node name declared twice"))
        seen.add(n)
    for n in decl.nodes:
        if n.op not in OPERATORS:
            violations.append(Violation("parameter", n.name, f"unknown operator {n.op!r}"))
        violations.extend(_check_params(n))
    for a, b in decl.edges:
        for x in (a, b):
            if x not in seen:
                violations.append(Violation("unknown_node", x, "edge references undeclared node"))
    ingresses = [n.name for n in decl.nodes if n.op == "ingress"]
    egresses = [n.name for n in decl.nodes if n.op == "egress"]
    if not ingresses:
        violations.append(Violation("missing_ingress", None, "pipeline has no ingress"))
    if len(egresses) != 1:
        violations.append(Violation("missing_egress", None, f"expected exactly one egress, found {len(egresses)}"))
    for n in ingresses:
        if decl.predecessors(n):
            violations.append(Violation("shape", n, "ingress has an inbound edge"))

    # cycle detection (iterative DFS colouring)
    adj = {n: [] for n in seen}
    for a, b in decl.edges:
        if a in adj and b in adj:
            adj[a].append(b)
    colour = dict.fromkeys(adj, 0)
    for root in adj:
        if colour[root]:
            continue
        stack = [(root, iter(adj[root]))]
        colour[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = 2
                stack.pop()
            elif colour[nxt] == 1:
                violations.append(Violation("cycle", nxt, f"edge {node} -> {nxt} closes a cycle"))
            elif colour[nxt] == 0:
                colour[nxt] = 1
                stack.append((nxt, iter(adj[nxt])))

    reach = set(ingresses)
    frontier = list(ingresses)
    while frontier:
        cur = frontier.pop()
        for nxt in adj.get(cur, []):
            if nxt not in reach:
                reach.add(nxt)
                frontier.append(nxt)
    for n in decl.nodes:
        if n.name not in reach:
            violations.append(Violation("unreachable", n.name, "not reachable from any ingress"))
    return violations


# ---------------------------------------------------------------------------
# textual config

_DURATION = re.compile(r"^(-?[0-9_]+)(us|ms|s)?$")
_UNITS = {None: 1, "us": 1, "ms": 1_000, "s": 1_000_000}


def _parse_value(raw: str):
    m = _DURATION.match(raw)
    if m:
        return int(m.group(1).replace("_", "")) * _UNITS[m.group(2)]
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_pipeline(text: str) -> PipelineDecl:
    """Parse the line-oriented pipeline format (see README, "Pipeline files")."""
    decl = PipelineDecl()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if words[0] == "connect":
            chain = [w.strip() for w in " ".join(words[1:]).split("->")]
            if len(chain) < 2 or not all(chain):
                raise ParamInvalid(f"line {lineno}: connect needs 'a -> b [-> c ...]'")
            decl.connect(*chain)
            continue
        if len(words) < 2:
            raise ParamInvalid(f"line {lineno}: expected '<operator> <name> [key=value ...]'")
        op, name = words[0].lower(), words[1]
        params = {}
        for kv in words[2:]:
            if "=" not in kv:
                raise ParamInvalid(f"line {lineno}: bad parameter {kv!r}")
            k, v = kv.split("=", 1)
            params[k] = _parse_value(v)
        if op == "filter" and "selectivity" in params and "lo" not in params:
            lo, hi = selectivity_band(float(params.pop("selectivity")))
            params.update(lo=lo, hi=hi)
        decl.add(name, op, **params)
    return decl


def format_pipeline(decl: PipelineDecl) -> str:
    lines = []
    for n in decl.nodes:
        params = " ".join(f"{k}={v}" for k, v in n.params.items())
        lines.append(f"{n.op} {n.name} {params}".rstrip())
    for a, b in decl.edges:
        lines.append(f"connect {a} -> {b}")
    return "\n".join(lines) + "\n"


def selectivity_band(fraction: float, lo: int = -(2**31)) -> tuple[int, int]:
    """Inclusive value band covering ``fraction`` of the int32 domain, starting at ``lo``."""
    if not 0 < fraction <= 1:
        raise ParamInvalid(f"selectivity must be in (0, 1], got {fraction}")
    span = max(1, round(fraction * 2**32))
    return lo, min(lo + span - 1, 2**31 - 1)


# ---------------------------------------------------------------------------
# execution plan: which primitive each node runs, per port and at window close


@dataclass(frozen=True)
class Stage:
    node: str
    prim: PrimitiveId
    params: tuple = ()

    def param(self, name, default=None):
        return dict(self.params).get(name, default)


@dataclass(frozen=True)
class Plan:
    width: int
    ports: tuple[str, ...]
    fields: tuple[int, ...]
    streaming: tuple[tuple[Stage, ...], ...]
    close: tuple[Stage, ...]
    egress: str

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.width)

    def port_of(self, ingress: str) -> int:
        return self.ports.index(ingress)


class PlanError(ParamInvalid):
    def __init__(self, violations: list[Violation]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


def compile_plan(decl: PipelineDecl) -> Plan:
    """Map a validated declaration onto streaming stages and a window-close chain.

    Streaming stages (Window, GroupBy, Filter) run per ingested batch; the first
    close stage consumes every chunk of a window plus the closing watermark.
    """
    violations = pipeline_validate(decl)
    if violations:
        raise PlanError(violations)
    bad: list[Violation] = []
    for n in decl.nodes:
        if len(decl.successors(n.name)) > 1:
            bad.append(Violation("shape", n.name, "fan-out is not supported"))
        if n.op != "join" and len(decl.predecessors(n.name)) > 1:
            bad.append(Violation("shape", n.name, "only join may have two inputs"))
    if bad:
        raise PlanError(bad)

    ports = tuple(n.name for n in decl.nodes if n.op == "ingress")
    fields = tuple(int(decl.node(p).params.get("fields", 3)) for p in ports)
    streaming = []
    heads = []
    widths = set()
    sorted_ports = []
    for p in ports:
        chain = []
        cur = p
        is_sorted = False
        while True:
            succ = decl.successors(cur)
            if not succ:
                bad.append(Violation("shape", cur, "chain ends before egress"))
                break
            nxt = decl.node(succ[0])
            if nxt.op not in STREAMING_OPS:
                heads.append(nxt.name)
                break
            if nxt.op == "window":
                if chain:
                    bad.append(Violation("shape", nxt.name, "window must directly follow ingress"))
                widths.add(nxt.params["width"])
                chain.append(Stage(nxt.name, PrimitiveId.SEGMENT, (("width", nxt.params["width"]),)))
            elif nxt.op == "groupby":
                chain.append(Stage(nxt.name, PrimitiveId.SORT))
                is_sorted = True
            elif nxt.op == "filter":
                chain.append(Stage(nxt.name, PrimitiveId.FILTER_BAND,
                                   (("lo", nxt.params["lo"]), ("hi", nxt.params["hi"]))))
            cur = nxt.name
        if not chain or chain[0].prim != PrimitiveId.SEGMENT:
            bad.append(Violation("shape", p, "ingress must feed a window operator"))
        streaming.append(tuple(chain))
        sorted_ports.append(is_sorted)
    if len(widths) > 1:
        bad.append(Violation("shape", None, "all windows must share one width"))
    if len(set(heads)) > 1:
        bad.append(Violation("shape", None, "all ports must meet at one operator"))
    if bad:
        raise PlanError(bad)

    head = decl.node(heads[0])
    if len(ports) > 1 and head.op != "join":
        raise PlanError([Violation("shape", head.name, "multiple ingresses require a join")])
    close = []
    cur = head
    in_sorted = all(sorted_ports)
    prev_op = None
    while cur.op != "egress":
        if cur.op == "aggregate":
            kind = cur.params["kind"]
            grouped = in_sorted
            close.append(Stage(cur.name, AGG_KINDS[kind], (("grouped", grouped),)))
            in_sorted = grouped
        elif cur.op == "join":
            if len(decl.predecessors(cur.name)) != 2:
                bad.append(Violation("shape", cur.name, "join needs exactly two inputs"))
            close.append(Stage(cur.name, PrimitiveId.JOIN))
            in_sorted = True
        elif cur.op in ("topk", "distinct"):
            if not in_sorted:
                bad.append(Violation("shape", cur.name, f"{cur.op} needs key-grouped input"))
            if cur.op == "topk":
                close.append(Stage(cur.name, PrimitiveId.TOPK, (("k", cur.params["k"]),)))
            else:
                close.append(Stage(cur.name, PrimitiveId.UNIQUE))
        elif cur.op == "rank":
            if prev_op != "aggregate":
                bad.append(Violation("shape", cur.name, "rank must follow a per-key aggregation"))
            close.append(Stage(cur.name, PrimitiveId.RANK))
            in_sorted = False
        else:
            bad.append(Violation("shape", cur.name, f"{cur.op} cannot follow a window-close operator"))
            break
        prev_op = cur.op
        succ = decl.successors(cur.name)
        cur = decl.node(succ[0])
    if not close:
        # egress straight after streaming stages: gather the window's chunks
        prim = PrimitiveId.MERGE if in_sorted else PrimitiveId.CONCAT
        close.append(Stage(cur.name, prim))
    if bad:
        raise PlanError(bad)
    return Plan(
        width=widths.pop(),
        ports=ports,
        fields=fields,
        streaming=tuple(streaming),
        close=tuple(close),
        egress=cur.name,
    )
