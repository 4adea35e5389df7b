"""Time the GRU recurrence kernels of every available backend.

    python benchmarks/bench_kernels.py [--T 70] [--B 128] [--H 64] [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from rsmm import kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--T", type=int, default=70)
    ap.add_argument("--B", type=int, default=128)
    ap.add_argument("--H", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    xproj = rng.normal(size=(args.T, args.B, 3 * args.H))
    w_hh = rng.normal(scale=0.1, size=(3 * args.H, args.H))
    h0 = np.zeros((args.B, args.H))
    dhs = rng.normal(size=(args.T, args.B, args.H))

    print(f"T={args.T} B={args.B} H={args.H}, best of {args.repeat}")
    times = {}
    for name, impl in kernels.available_backends().items():
        hs, gates, hn = impl.gru_forward(xproj, w_hh, h0)
        fwd = min(timeit.repeat(lambda: impl.gru_forward(xproj, w_hh, h0), number=1, repeat=args.repeat))
        bwd = min(
            timeit.repeat(lambda: impl.gru_backward(dhs, hs, h0, gates, hn, w_hh), number=1, repeat=args.repeat)
        )
        times[name] = fwd + bwd
        print(f"{name:>7}: forward {fwd * 1e3:8.3f} ms  backward {bwd * 1e3:8.3f} ms")
    if len(times) > 1:
        print(f"speedup (python / cython): {times['python'] / times['cython']:.2f}x")


if __name__ == "__main__":
    main()
