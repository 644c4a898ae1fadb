"""Time the compiled and numpy selective-scan kernels on identical inputs.

    python benchmarks/bench_scan.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from higstm.kernels import backends

SIZES = [(30, 16, 8, 8), (100, 16, 16, 16), (300, 16, 64, 48)]


def inputs(N, T, D, S, seed=0):
    r = np.random.default_rng(seed)
    delta = np.exp(r.normal(-3.0, 0.5, (N, T, D)))
    A = -np.tile(np.arange(1.0, S + 1), (D, 1))
    B, C = r.normal(size=(N, T, S)), r.normal(size=(N, T, S))
    x, gy = r.normal(size=(N, T, D)), r.normal(size=(N, T, D))
    return delta, A, B, C, x, gy


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    impls = backends()
    print(f"backends: {', '.join(impls)}")
    print(f"{'N,T,D,S':>18} {'backend':>8} {'forward ms':>11} {'backward ms':>12} {'max |dy|':>10}")
    for size in SIZES:
        delta, A, B, C, x, gy = inputs(*size)
        ref = None
        for name, mod in impls.items():
            y, saved = mod.selective_forward(delta, A, B, C, x)
            fwd = min(timeit.repeat(lambda: mod.selective_forward(delta, A, B, C, x),
                                    number=1, repeat=args.repeat))
            bwd = min(timeit.repeat(lambda: mod.selective_backward(delta, A, B, C, x, saved, gy),
                                    number=1, repeat=args.repeat))
            ref = y if ref is None else ref
            print(f"{str(size):>18} {name:>8} {1e3 * fwd:11.3f} {1e3 * bwd:12.3f} "
                  f"{np.abs(y - ref).max():10.1e}")


if __name__ == "__main__":
    main()
