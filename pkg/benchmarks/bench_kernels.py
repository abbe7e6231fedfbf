"""Time the compiled segment/scatter kernels against the numpy fallback.

Shapes default to a mid-sized graph workload: 200k edges over 20k nodes
with 300-wide rows, roughly what one attention layer sees per forward.
Each kernel is timed best-of-`--repeats` after a warmup call, and the
backends are checked against each other before timing.

Usage:
    python3 benchmarks/bench_kernels.py [--edges 200000] [--nodes 20000]
                                        [--dim 300] [--repeats 5]
"""

import argparse
import time

import numpy as np

from mmkg_align.kernels import _npkernels

try:
    from mmkg_align.kernels import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeats):
    fn()  # warmup
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(edges, nodes, dim, rng):
    seg = np.sort(rng.integers(0, nodes, size=edges))
    idx = rng.integers(0, nodes, size=edges)
    rows = rng.standard_normal((edges, dim))
    vals = rng.standard_normal(edges)
    weights = rng.standard_normal(edges)
    gout = rng.standard_normal((nodes, dim))

    return [
        ("scatter_add_rows", lambda k: k.scatter_add_rows(np.zeros((nodes, dim)), idx, rows)),
        ("scatter_add_vec", lambda k: k.scatter_add_vec(np.zeros(nodes), idx, vals)),
        ("segment_sum", lambda k: k.segment_sum(vals, seg, nodes)),
        ("segment_max", lambda k: k.segment_max(vals, seg, nodes)),
        ("segment_weighted_sum", lambda k: k.segment_weighted_sum(rows, weights, seg, nodes)),
        ("segment_weighted_sum_backward",
         lambda k: k.segment_weighted_sum_backward(gout, rows, weights, seg)),
    ]


def check_agreement(cases):
    for name, fn in cases:
        a = fn(_npkernels)
        b = fn(_ckernels)
        pairs = zip(a, b) if isinstance(a, tuple) else [(a, b)]
        for x, y in pairs:
            np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12, err_msg=name)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--edges", type=int, default=200_000)
    ap.add_argument("--nodes", type=int, default=20_000)
    ap.add_argument("--dim", type=int, default=300)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    cases = build_cases(args.edges, args.nodes, args.dim, rng)

    if _ckernels is None:
        print("compiled backend not importable; timing numpy fallback only")
    else:
        check_agreement(cases)

    print(f"edges={args.edges} nodes={args.nodes} dim={args.dim} "
          f"best of {args.repeats}")
    header = f"{'kernel':32s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for name, fn in cases:
        t_np = best_of(lambda: fn(_npkernels), args.repeats)
        if _ckernels is None:
            print(f"{name:32s} {t_np * 1e3:9.2f}ms {'n/a':>10s} {'':>8s}")
            continue
        t_cy = best_of(lambda: fn(_ckernels), args.repeats)
        print(f"{name:32s} {t_np * 1e3:9.2f}ms {t_cy * 1e3:9.2f}ms "
              f"{t_np / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
