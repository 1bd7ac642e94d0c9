"""Compare the compiled convolution kernels against the numpy fallback.

Build the extension in place first, then run from the repository root:

    python setup.py build_ext --inplace
    python benchmarks/bench_kernels.py [--batch 32] [--repeats 5]

Each backend runs the three convolution primitives (forward, input gradient,
kernel gradient) on the stem-sized workload and reports the best wall time
and throughput. The two backends must agree to float64 round-off, which is
checked before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from spectroemg import kernels_numpy

try:
    from spectroemg import _kernels
except ImportError:
    _kernels = None


def best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(module, x, kernels, grad_out, repeats: int):
    kh, kw = kernels.shape[:2]
    flops = 2.0 * x.shape[0] * x.shape[1] * x.shape[2] \
        * kernels.shape[2] * kernels.shape[3] * kh * kw
    rows = []
    for name, fn in (
        ("forward", lambda: module.conv2d_forward(x, kernels)),
        ("backward_input", lambda: module.conv2d_backward_input(grad_out, kernels)),
        ("backward_kernels", lambda: module.conv2d_backward_kernels(x, grad_out, kh, kw)),
    ):
        seconds = best_time(fn, repeats)
        rows.append((name, seconds * 1e3, flops / seconds / 1e9))
    return rows


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--height", type=int, default=129)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--c-in", type=int, default=16)
    ap.add_argument("--c-out", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    modules = [kernels_numpy]
    if _kernels is not None:
        modules.append(_kernels)
    else:
        print("compiled extension not built; benchmarking the numpy backend only")

    rng = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        shape = (args.batch, args.height, args.width, args.c_in)
        x = rng.standard_normal(shape).astype(dtype)
        kernels = rng.standard_normal((3, 3, args.c_in, args.c_out)).astype(dtype)
        grad_out = rng.standard_normal(shape[:3] + (args.c_out,)).astype(dtype)

        if _kernels is not None:
            ref = kernels_numpy.conv2d_forward(x, kernels)
            got = _kernels.conv2d_forward(x, kernels)
            err = float(np.max(np.abs(ref - got)))
            tol = 1e-3 if dtype == np.float32 else 1e-10
            if err > tol:
                raise SystemExit(f"backend disagreement at {np.dtype(dtype).name}: {err}")

        print(f"\n{np.dtype(dtype).name}  batch={args.batch} "
              f"{args.height}x{args.width} {args.c_in}->{args.c_out} 3x3")
        print(f"{'backend':<10} {'primitive':<18} {'ms':>9} {'GFLOP/s':>9}")
        for module in modules:
            for name, ms, gflops in run(module, x, kernels, grad_out, args.repeats):
                print(f"{module.NAME:<10} {name:<18} {ms:9.2f} {gflops:9.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
