"""Compare the compiled and pure-NumPy convolution backends.

Runs the forward and backward convolution kernels at the shapes the
selection encoders actually use and reports per-call timings plus the
speedup of the compiled extension over the fallback.

Usage: python benchmarks/bench_conv.py [--repeats N]
"""

import argparse
import time

import numpy as np

from srisp.kernels import conv2d_backward, conv2d_forward, get_backend

# (label, height, width, in_ch, out_ch, stride) — mirrors the encoder
# stack applied to a 256px selection input.
CASES = [
    ("enc1 256x256 3->32", 256, 256, 3, 32, 2),
    ("enc2 128x128 32->64", 128, 128, 32, 64, 2),
    ("enc3 64x64 64->128", 64, 64, 64, 128, 2),
    ("enc4 32x32 128->128", 32, 32, 128, 128, 2),
    ("enc5 16x16 128->128", 16, 16, 128, 128, 2),
]


def time_call(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = []
    for name in ("numpy", "cython"):
        try:
            get_backend(name)
            backends.append(name)
        except (ValueError, ImportError) as exc:
            print(f"backend {name!r} unavailable: {exc}")
    if "cython" not in backends:
        print("compiled extension missing; timing the fallback only")

    rng = np.random.default_rng(0)
    header = f"{'case':<24}" + "".join(f"{n:>12}" for n in backends) + "   speedup"
    print(header)
    print("-" * len(header))
    for label, h, w_, cin, cout, stride in CASES:
        x = rng.standard_normal((h, w_, cin)).astype(np.float32)
        w = rng.standard_normal((3, 3, cin, cout)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        gy = conv2d_forward(x, w, b, stride)
        for tag, call in (
            ("fwd", lambda be: conv2d_forward(x, w, b, stride, backend=be)),
            ("bwd", lambda be: conv2d_backward(x, w, stride, gy, backend=be)),
        ):
            times = {
                n: time_call(lambda n=n: call(n), args.repeats)
                for n in backends
            }
            row = f"{label + ' ' + tag:<24}"
            row += "".join(f"{times[n] * 1e3:>10.2f}ms" for n in backends)
            if "cython" in times and "numpy" in times:
                row += f"   {times['numpy'] / times['cython']:>6.2f}x"
            print(row)

    fy = {
        n: conv2d_forward(x, w, b, stride, backend=n) for n in backends
    }
    if len(fy) == 2:
        diff = float(np.abs(fy["numpy"] - fy["cython"]).max())
        print(f"\nmax |numpy - cython| on last case: {diff:.3e}")


if __name__ == "__main__":
    main()
