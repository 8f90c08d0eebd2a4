"""Benchmark definitions, seeded input generators and the run harness."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields as dc_fields, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .codec import BlockCodec, SbtlogWriter
from .control import EngineConfig, RunReport, run_pipeline
from .errors import ParamInvalid
from .iogateway import events_frame, watermark_frame
from .model import PipelineDecl, event_dtype, selectivity_band
from .verifier import VerdictReport, verify_correctness

SECOND = 1_000_000
DESK_WINDOW_EVENTS = 100_000
FULL_WINDOW_EVENTS = 1_000_000
POWER_PLUGS = 2000
POWER_HOUSES = 40


def _chain(*ops) -> PipelineDecl:
    d = PipelineDecl()
    names = []
    for i, (op, params) in enumerate(ops):
        name = f"{op}{i}"
        d.add(name, op, **params)
        names.append(name)
    return d.connect(*names)


def _decl_topk(width):
    return _chain(("ingress", {}), ("window", {"width": width}), ("groupby", {}),
                  ("topk", {"k": 3}), ("egress", {}))


def _decl_distinct(width):
    return _chain(("ingress", {}), ("window", {"width": width}), ("groupby", {}),
                  ("distinct", {}), ("egress", {}))


def _decl_winsum(width):
    return _chain(("ingress", {}), ("window", {"width": width}),
                  ("aggregate", {"kind": "sum"}), ("egress", {}))


def _decl_filter(width):
    lo, hi = selectivity_band(0.01)
    return _chain(("ingress", {}), ("window", {"width": width}),
                  ("filter", {"lo": lo, "hi": hi}), ("egress", {}))


def _decl_power(width):
    return _chain(("ingress", {"fields": 4}), ("window", {"width": width}), ("groupby", {}),
                  ("aggregate", {"kind": "avg"}), ("rank", {}), ("egress", {}))


def _decl_join(width):
    d = PipelineDecl()
    for side in ("left", "right"):
        d.add(f"in_{side}", "ingress").add(f"win_{side}", "window", width=width)
        d.add(f"grp_{side}", "groupby")
    d.add("join", "join").add("out", "egress")
    for side in ("left", "right"):
        d.connect(f"in_{side}", f"win_{side}", f"grp_{side}", "join")
    return d.connect("join", "out")


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    decl_factory: Callable[[int], PipelineDecl]
    fields: int = 3
    ports: int = 1
    key_space: int | None = None     # None: full 32-bit keys
    width: int = SECOND
    window_events: int = DESK_WINDOW_EVENTS
    source: str = "synthetic"

    def decl(self) -> PipelineDecl:
        return self.decl_factory(self.width)

    def scaled(self, window_events: int) -> "BenchmarkSpec":
        return replace(self, window_events=window_events)


BENCHMARKS = {
    "TopK": BenchmarkSpec("TopK", _decl_topk, key_space=10_000),
    "Distinct": BenchmarkSpec("Distinct", _decl_distinct, key_space=11_000),
    "Join": BenchmarkSpec("Join", _decl_join, ports=2, key_space=1_000_000),
    "WinSum": BenchmarkSpec("WinSum", _decl_winsum),
    "Filter": BenchmarkSpec("Filter", _decl_filter),
    "Power": BenchmarkSpec("Power", _decl_power, fields=4, key_space=POWER_PLUGS),
}


def get_spec(name: str) -> BenchmarkSpec:
    for k, v in BENCHMARKS.items():
        if k.lower() == name.lower():
            return v
    raise ParamInvalid(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")


# ---------------------------------------------------------------------------
# input generation

@dataclass
class Workload:
    """Seeded input: per-port event arrays per window plus the frame stream carrying them."""

    spec: BenchmarkSpec
    windows: int
    seed: int
    events: list[list[np.ndarray]] = field(default_factory=list)   # [window][port]

    @property
    def count(self) -> int:
        return sum(len(e) for w in self.events for e in w)

    @property
    def nbytes(self) -> int:
        return sum(e.nbytes for w in self.events for e in w)

    def port_events(self, port: int) -> np.ndarray:
        return np.concatenate([w[port] for w in self.events])

    def frames(self, key: bytes | None = None, frame_events: int = 10_000) -> Iterator[bytes]:
        for w, per_port in enumerate(self.events):
            for port, ev in enumerate(per_port):
                for i in range(0, len(ev), frame_events):
                    yield events_frame(ev[i:i + frame_events], port, key)
            yield watermark_frame((w + 1) * self.spec.width, 0, key)


def _window_events(spec: BenchmarkSpec, w: int, n: int, rng: np.random.Generator) -> np.ndarray:
    ev = np.zeros(n, dtype=event_dtype(spec.fields))
    lo = w * spec.width
    ev["t"] = np.sort(rng.integers(lo, lo + spec.width, n, dtype=np.int64)).astype(np.uint32)
    if spec.key_space is None:
        ev["key"] = rng.integers(-2**31, 2**31, n, dtype=np.int64)
    else:
        ev["key"] = rng.integers(0, spec.key_space, n, dtype=np.int64)
    if spec.name == "Power":
        ev["value"] = rng.integers(0, 10_000, n)
        ev["extra"] = ev["key"] // (POWER_PLUGS // POWER_HOUSES)
    else:
        ev["value"] = rng.integers(-2**31, 2**31, n, dtype=np.int64)
    return ev


def generate_events(spec: BenchmarkSpec, count: int, seed: int = 42) -> Workload:
    """``count`` events per port, cut into windows of ``spec.window_events``.

    Every window gets at least one event and ends with one watermark at its
    right edge, so each watermark completes exactly one window.
    """
    if count < 0:
        raise ParamInvalid("event count must be >= 0")
    rng = np.random.default_rng(seed)
    per = max(1, spec.window_events)
    windows = -(-count // per) if count else 0
    wl = Workload(spec, windows, seed)
    left = count
    for w in range(windows):
        n = min(per, left)
        left -= n
        wl.events.append([_window_events(spec, w, n, rng) for _ in range(spec.ports)])
    return wl


def load_trace_csv(path, spec: BenchmarkSpec, time_col: str, key_col: str, value_col: str,
                   extra_col: str | None = None, time_scale: float = 1.0) -> Workload:
    """Build a workload from a CSV trace (e.g. taxi rides or sensor readings).

    Times are multiplied by ``time_scale`` to get microseconds and rebased so
    the first event sits at 0; rows are sorted by time.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return Workload(spec, 0, 0)
    ev = np.zeros(len(rows), dtype=event_dtype(spec.fields))
    t = np.array([float(r[time_col]) * time_scale for r in rows])
    order = np.argsort(t, kind="stable")
    t = (t[order] - t[order[0]]).astype(np.int64)
    ev["t"] = t
    ev["key"] = np.array([int(float(r[key_col])) for r in rows], dtype=np.int64)[order]
    ev["value"] = np.array([int(float(r[value_col])) for r in rows], dtype=np.int64)[order]
    if extra_col and spec.fields == 4:
        ev["extra"] = np.array([int(float(r[extra_col])) for r in rows], dtype=np.int64)[order]
    win = t // spec.width
    wl = Workload(spec, int(win[-1]) + 1, 0)
    for w in range(wl.windows):
        wl.events.append([ev[win == w]] * spec.ports)
    return wl


# ---------------------------------------------------------------------------
# running

@dataclass
class RunMetrics:
    bench: str
    variant: str
    workers: int
    batch: int
    window_events: int
    windows: int
    events: int
    elapsed_s: float
    throughput_eps: float
    throughput_mbps: float
    delay_mean_ms: float
    delay_max_ms: float
    delay_target_ms: float | None
    target_met: bool | None
    peak_resident_bytes: int
    audit_records: int
    audit_records_per_s: float
    audit_blocks: int
    compression_ratio: float
    audit_cpu_fraction: float
    bytes_copied: int
    rate_eps: float | None = None
    verified: bool | None = None

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in dc_fields(cls)]

    def row(self) -> dict:
        return asdict(self)


@dataclass
class BenchResult:
    metrics: RunMetrics
    report: RunReport
    blocks: list[bytes]
    verdict: VerdictReport | None
    workload: Workload


def _metrics(spec, cfg, wl, rep, rate=None) -> RunMetrics:
    c = rep.counters
    delays = [d / 1000 for d in rep.delays_us.values()]
    raw, packed = c.get("audit_raw_bytes", 0), c.get("audit_block_bytes", 0)
    mean = sum(delays) / len(delays) if delays else 0.0
    target = cfg.target_delay_ms
    return RunMetrics(
        bench=spec.name, variant=cfg.variant, workers=cfg.workers, batch=cfg.batch_size,
        window_events=spec.window_events, windows=wl.windows, events=rep.events,
        elapsed_s=rep.elapsed_s, throughput_eps=rep.throughput_eps,
        throughput_mbps=rep.throughput_mbps, delay_mean_ms=mean,
        delay_max_ms=max(delays, default=0.0), delay_target_ms=target,
        target_met=None if target is None else max(delays, default=0.0) <= target,
        peak_resident_bytes=c.get("peak_resident_bytes", 0),
        audit_records=c.get("audit_records", 0),
        audit_records_per_s=c.get("audit_records", 0) / rep.elapsed_s if rep.elapsed_s else 0.0,
        audit_blocks=c.get("audit_blocks", 0),
        compression_ratio=raw / packed if packed else 0.0,
        audit_cpu_fraction=(c.get("audit_ns", 0) / 1e9) / rep.cpu_s if rep.cpu_s else 0.0,
        bytes_copied=c.get("bytes_copied", 0),
        rate_eps=rate,
    )


def run_benchmark(spec: BenchmarkSpec, config: EngineConfig | None = None, windows: int = 10,
                  seed: int = 42, out_dir=None, verify: bool = False,
                  workload: Workload | None = None, rate_eps: float | None = None) -> BenchResult:
    """One engine run over seeded input; optionally writes artifacts and verifies inline."""
    cfg = config or EngineConfig()
    wl = workload or generate_events(spec, windows * spec.window_events, seed)
    blocks: list[bytes] = []
    cfg = replace(cfg, audit_sink=blocks.append, rate_eps=rate_eps)
    frames = list(wl.frames(cfg.ingress_key))
    rep = run_pipeline(spec.decl(), cfg, frames)
    m = _metrics(spec, cfg, wl, rep, rate_eps)
    verdict = None
    if verify and cfg.secure:
        verdict = verify_correctness(blocks, spec.decl(), codec=BlockCodec(encrypt=cfg.audit_encrypt))
        m.verified = verdict.correct
    if out_dir is not None:
        write_artifacts(Path(out_dir), m, rep, blocks, verdict)
    return BenchResult(m, rep, blocks, verdict, wl)


def search_throughput(spec: BenchmarkSpec, config: EngineConfig, windows: int = 5, seed: int = 42,
                      start_eps: float = 100_000, step: float = 1.5, max_steps: int = 12) -> BenchResult:
    """Ramp the input rate until the delay target is missed; return the last sustained run."""
    if config.target_delay_ms is None:
        raise ParamInvalid("a throughput search needs a delay target")
    wl = generate_events(spec, windows * spec.window_events, seed)
    best = None
    rate = start_eps
    for _ in range(max_steps):
        res = run_benchmark(spec, config, workload=wl, rate_eps=rate)
        if not res.metrics.target_met or res.report.error:
            break
        best = res
        if res.metrics.throughput_eps < rate * 0.9:
            break   # the engine no longer keeps up with the offered rate
        rate *= step
    if best is None:
        best = res
    return best


# ---------------------------------------------------------------------------
# artifacts

def write_metrics_csv(path: Path, rows: list[RunMetrics], append: bool = False) -> None:
    exists = path.exists() and append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RunMetrics.columns())
        if not exists:
            w.writeheader()
        for r in rows:
            w.writerow(r.row())


def egress_bytes(rep: RunReport) -> bytes:
    """Decrypted results as ``u64 window | u32 length | bytes`` records in window order."""
    buf = io.BytesIO()
    for w in sorted(rep.payloads):
        data = rep.payloads[w]
        buf.write(struct.pack("<QI", w, len(data)))
        buf.write(data)
    return buf.getvalue()


def read_egress(data: bytes) -> dict[int, bytes]:
    out = {}
    pos = 0
    while pos < len(data):
        w, n = struct.unpack_from("<QI", data, pos)
        pos += 12
        out[w] = data[pos:pos + n]
        pos += n
    return out


def write_artifacts(out: Path, m: RunMetrics, rep: RunReport, blocks: list[bytes],
                    verdict: VerdictReport | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", [m])
    with open(out / "run.sbtlog", "wb") as fh:
        writer = SbtlogWriter(fh)
        for b in blocks:
            writer(b)
    (out / "egress.bin").write_bytes(egress_bytes(rep))
    if verdict is not None:
        (out / "verdict.json").write_text(verdict.to_json())
    elif rep.error:
        (out / "verdict.json").write_text(json.dumps({"error": rep.error}))
