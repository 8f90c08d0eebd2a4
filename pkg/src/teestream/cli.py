"""Command line: ``teestream run`` for benchmarks, ``teestream verify`` for audit logs."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import (
    BENCHMARKS,
    DESK_WINDOW_EVENTS,
    FULL_WINDOW_EVENTS,
    get_spec,
    run_benchmark,
    search_throughput,
    write_artifacts,
)
from .codec import BlockCodec, read_sbtlog
from .control import VARIANTS, EngineConfig
from .errors import TeeError
from .model import parse_pipeline
from .verifier import verify_correctness


def _run_parser(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bench", required=True, help=f"one of {', '.join(BENCHMARKS)}")
    p.add_argument("--variant", choices=VARIANTS, default="sbt")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch", type=int, default=100_000, help="events per ingestion batch")
    p.add_argument("--window-events", type=int, default=DESK_WINDOW_EVENTS)
    p.add_argument("--full-scale", action="store_true",
                   help=f"use {FULL_WINDOW_EVENTS:,} events per window")
    p.add_argument("--windows", type=int, default=10)
    p.add_argument("--delay-target", type=float, default=None, metavar="MS",
                   help="search for the highest input rate that keeps output delay under MS")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--verify", action="store_true", help="replay the audit log after the run")
    p.add_argument("--strict-gate", action="store_true", help="copy every request and response across the gate")
    p.add_argument("--no-hints", action="store_true")
    p.add_argument("--high-water", type=int, default=512, metavar="MIB")


def _verify_parser(p: argparse.ArgumentParser) -> None:
    p.add_argument("log", type=Path, help=".sbtlog file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--bench", help="pipeline of a named benchmark")
    src.add_argument("--pipeline", type=Path, help="pipeline file")
    p.add_argument("--partial", action="store_true", help="the log is a prefix of a running stream")
    p.add_argument("--encrypted", action="store_true", help="blocks are encrypted")
    p.add_argument("--json", type=Path, default=None, help="also write the verdict here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="teestream")
    sub = ap.add_subparsers(dest="cmd")
    _run_parser(sub.add_parser("run", help="run one benchmark"))
    _verify_parser(sub.add_parser("verify", help="verify an audit log"))
    return ap


def cmd_run(args) -> int:
    spec = get_spec(args.bench).scaled(FULL_WINDOW_EVENTS if args.full_scale else args.window_events)
    cfg = EngineConfig(
        workers=args.workers, batch_size=args.batch, variant=args.variant,
        target_delay_ms=args.delay_target, strict_gate=args.strict_gate,
        hints=not args.no_hints, high_water=args.high_water * 1024 * 1024,
    )
    if args.delay_target is not None:
        res = search_throughput(spec, cfg, windows=args.windows, seed=args.seed)
        if args.verify and cfg.secure:
            from .verifier import verify_correctness as vc
            res.verdict = vc(res.blocks, spec.decl())
            res.metrics.verified = res.verdict.correct
        write_artifacts(args.out, res.metrics, res.report, res.blocks, res.verdict)
    else:
        res = run_benchmark(spec, cfg, windows=args.windows, seed=args.seed,
                            out_dir=args.out, verify=args.verify)
    m = res.metrics
    print(f"{m.bench} {m.variant}: {m.events:,} events in {m.elapsed_s:.2f}s "
          f"({m.throughput_eps:,.0f} ev/s, {m.throughput_mbps:.1f} MB/s), "
          f"max delay {m.delay_max_ms:.1f} ms, peak {m.peak_resident_bytes / 2**20:.0f} MiB")
    if res.report.error:
        print(f"run aborted: {res.report.error}", file=sys.stderr)
        return 2
    if res.verdict is not None:
        print("verdict:", "PASS" if res.verdict.correct else f"FAIL ({res.verdict.violation})")
        return 0 if res.verdict.correct else 1
    return 0


def cmd_verify(args) -> int:
    decl = get_spec(args.bench).decl() if args.bench else parse_pipeline(args.pipeline.read_text())
    try:
        verdict = verify_correctness(read_sbtlog(args.log), decl, final=not args.partial,
                                     codec=BlockCodec(encrypt=args.encrypted))
    except TeeError as exc:
        print(json.dumps({"correct": False, "refused": str(exc)}))
        return 1
    text = verdict.to_json()
    if args.json:
        args.json.write_text(text)
    print(text)
    return 0 if verdict.correct else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd is None:
        build_parser().print_help()
        return 2
    try:
        return cmd_run(args) if args.cmd == "run" else cmd_verify(args)
    except TeeError as exc:
        print(f"teestream: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
