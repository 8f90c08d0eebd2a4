"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5] [--csv out.csv]
"""

from __future__ import annotations

import argparse
import csv
import sys
import timeit

import numpy as np

from teestream import _fallback

try:
    from teestream import _kernels
except ImportError:
    _kernels = None


def _cases(n: int, rng: np.random.Generator):
    keys = rng.integers(0, 2**63, n, dtype=np.uint64)
    runs = 8
    parts = np.array_split(rng.integers(0, 2**63, n, dtype=np.uint64), runs)
    merged = np.concatenate([np.sort(p) for p in parts])
    offsets = np.zeros(runs + 1, dtype=np.int64)
    np.cumsum([len(p) for p in parts], out=offsets[1:])
    left = rng.integers(0, n, n // 2, dtype=np.int32)
    right = rng.integers(0, n, n // 2, dtype=np.int32)
    small = rng.integers(0, 2**20, n, dtype=np.uint64)
    encoded = _fallback.varint_encode(small)
    return {
        "sort_perm": lambda m: m.sort_perm(keys),
        "merge_perm": lambda m: m.merge_perm(merged, offsets),
        "join_pairs": lambda m: m.join_pairs(left, right),
        "varint_encode": lambda m: m.varint_encode(small),
        "varint_decode": lambda m: m.varint_decode(encoded, n, 0),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    rows = []
    impls = [("python", _fallback)] + ([("compiled", _kernels)] if _kernels else [])
    for name, fn in _cases(args.n, rng).items():
        times = {}
        for label, mod in impls:
            reps = 1 if (label == "python" and name == "varint_decode") else args.repeat
            times[label] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=reps))
        speedup = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        rows.append({"kernel": name, "n": args.n, **{f"{k}_s": v for k, v in times.items()},
                     "speedup": speedup})
        print(f"{name:14s} " + "  ".join(f"{k} {v * 1e3:9.2f} ms" for k, v in times.items())
              + f"  x{speedup:.1f}")
    if _kernels is None:
        print("compiled extension not built; timings cover the fallback only", file=sys.stderr)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
