"""Compare the compiled and NumPy retrieval kernels.

    python benchmarks/bench_kernels.py [--queries 500] [--items 20000] [--k 50]

Prints best-of-N wall time per kernel and backend and checks that both
backends return identical arrays.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from smar import kernels


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--items", type=int, default=20000)
    ap.add_argument("--k", type=int, default=50)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    # quantized scores so ties occur and the tie-break path is exercised
    scores = np.round(rng.standard_normal((args.queries, args.items)), 2)
    rel = [rng.choice(args.items, size=rng.integers(1, 30), replace=False) for _ in range(args.queries)]
    indptr = np.cumsum([0] + [len(r) for r in rel])
    indices = np.concatenate([np.sort(r) for r in rel])

    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    if len(backends) == 1:
        print("compiled kernels unavailable; timing the NumPy fallback only")
    results, times = {}, {}
    for b in backends:
        idx, val = kernels.topk_rows(scores, args.k, args.threads, backend=b)
        hits = kernels.prefix_hits(idx, indptr, indices, backend=b)
        results[b] = (idx, val, hits)
        times[b] = (
            best(lambda: kernels.topk_rows(scores, args.k, args.threads, backend=b), args.repeat),
            best(lambda: kernels.prefix_hits(idx, indptr, indices, backend=b), args.repeat),
        )
    if len(backends) == 2:
        for a, c in zip(results["python"], results["cython"]):
            np.testing.assert_array_equal(a, c)

    print(f"{args.queries} queries x {args.items} items, k={args.k}, threads={args.threads}")
    print(f"{'kernel':<12}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for i, name in enumerate(("topk_rows", "prefix_hits")):
        row = f"{name:<12}" + "".join(f"{times[b][i] * 1e3:>10.1f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{times['python'][i] / times['cython'][i]:>11.1f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
