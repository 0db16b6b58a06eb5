#!/usr/bin/env python3
"""Compare the numba and numpy kernel backends on training-shaped workloads.

Run:  python3 benchmarks/bench_kernels.py [--repeats 5]
"""
import argparse
import time

import numpy as np

from reroute import kernels

SHAPES = [
    # (label, N, C, H, O, stride, pad)
    ("stage1 width8", 64, 8, 32, 8, 1, 1),
    ("stage3 width8", 64, 32, 8, 32, 1, 1),
    ("stage1 width16", 64, 16, 32, 16, 1, 1),
    ("stage3 width16", 64, 64, 8, 64, 1, 1),
    ("downsample", 64, 16, 32, 32, 2, 1),
]


def time_fn(fn, *args, repeats=5):
    fn(*args)  # warm-up / JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = {name: kernels.get_backend(name) for name in kernels.available_backends()}
    print(f"active backend: {kernels.active.__name__.rsplit('_', 1)[-1]}")
    print(f"{'kernel':<26}{'shape':<18}" + "".join(f"{b:>12}" for b in backends))

    rng = np.random.default_rng(0)
    for label, n, c, h, o, stride, pad in SHAPES:
        x = rng.standard_normal((n, c, h, h)).astype(np.float32)
        w = rng.standard_normal((o, c, 3, 3)).astype(np.float32)
        ho = (h + 2 * pad - 3) // stride + 1
        gy = rng.standard_normal((n, o, ho, ho)).astype(np.float32)

        rows = {
            "conv2d_forward": lambda b: time_fn(b.conv2d_forward, x, w, stride, pad,
                                                repeats=args.repeats),
            "conv2d_backward_input": lambda b: time_fn(b.conv2d_backward_input, gy, w, h, h,
                                                       stride, pad, repeats=args.repeats),
            "conv2d_backward_weight": lambda b: time_fn(b.conv2d_backward_weight, gy, x, 3, 3,
                                                        stride, pad, repeats=args.repeats),
        }
        for kname, runner in rows.items():
            cells = "".join(f"{runner(b) * 1000:>10.2f}ms" for b in backends.values())
            print(f"{kname:<26}{label:<18}{cells}")

    x = rng.standard_normal((64, 16, 33, 33)).astype(np.float32)
    for kname in ("maxpool_forward",):
        cells = ""
        outs = {}
        for bname, b in backends.items():
            dt = time_fn(b.maxpool_forward, x, 2, 1, repeats=args.repeats)
            outs[bname] = b.maxpool_forward(x, 2, 1)[0]
            cells += f"{dt * 1000:>10.2f}ms"
        print(f"{kname:<26}{'stem pool':<18}{cells}")
    names = list(backends)
    if len(names) == 2:
        diff = np.abs(outs[names[0]] - outs[names[1]]).max()
        print(f"\nmax cross-backend maxpool difference: {diff:.2e}")


if __name__ == "__main__":
    main()
