"""Stream analytics with an untrusted control plane, a gated data plane and replay attestation."""

from .audit import AuditRecord, RecordKind
from .bench import BENCHMARKS, BenchmarkSpec, generate_events, run_benchmark
from .codec import BlockCodec, decode_columnar, encode_columnar
from .control import Engine, EngineConfig, RunReport, run_pipeline
from .dataplane import DataPlane, GateConfig, GateRequest, GateResponse
from .errors import (
    AuthFail,
    Backpressure,
    Corrupt,
    EmptyInput,
    LifecycleViolation,
    ParamInvalid,
    RefInvalid,
    RejectedInput,
    TeeError,
)
from .kernels import BACKEND
from .memory import After, Allocator, Parallel
from .model import Event, PipelineDecl, WindowSpec, assign_window, compile_plan, parse_pipeline
from .verifier import VerdictReport, verify_correctness, verify_freshness, verify_records

__version__ = "0.1.0"

__all__ = [
    "After", "Allocator", "AuditRecord", "AuthFail", "BACKEND", "BENCHMARKS", "Backpressure",
    "BenchmarkSpec", "BlockCodec", "Corrupt", "DataPlane", "EmptyInput", "Engine", "EngineConfig",
    "Event", "GateConfig", "GateRequest", "GateResponse", "LifecycleViolation", "Parallel",
    "ParamInvalid", "PipelineDecl", "RecordKind", "RefInvalid", "RejectedInput", "RunReport",
    "TeeError", "VerdictReport", "WindowSpec", "assign_window", "compile_plan", "decode_columnar",
    "encode_columnar", "generate_events", "parse_pipeline", "run_benchmark", "run_pipeline",
    "verify_correctness", "verify_freshness", "verify_records",
]
