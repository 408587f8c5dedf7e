"""Benchmark the compiled convolution backend against the reference one.

Run as: python3 -m vesselforge.bench [--repeats N] [--size small|medium]

Times conv3d forward, input-gradient, and weight-gradient kernels on
network-shaped workloads, reports the speedup, and checks that both
backends agree numerically.
"""
import argparse
import sys
import time

import numpy as np

from .kernels import _ref

try:
    from .kernels import _fast
except ImportError:
    _fast = None


def _cases(size):
    if size == "small":
        shapes = [
            ("encoder 16^3", (2, 4, 16, 16, 16), (8, 4, 3, 3, 3), 1, 1),
            ("downsample", (2, 8, 16, 16, 16), (8, 8, 3, 3, 3), 2, 1),
            ("bottleneck", (2, 16, 4, 4, 4), (32, 16, 3, 3, 3), 1, 1),
        ]
    else:
        shapes = [
            ("encoder 32^3", (2, 8, 32, 32, 32), (16, 8, 3, 3, 3), 1, 1),
            ("downsample", (2, 16, 32, 32, 32), (16, 16, 3, 3, 3), 2, 1),
            ("bottleneck", (2, 32, 8, 8, 8), (64, 32, 3, 3, 3), 1, 1),
        ]
    rng = np.random.default_rng(0)
    out = []
    for name, xs, ws, stride, pad in shapes:
        x = rng.standard_normal(xs, dtype=np.float32)
        w = rng.standard_normal(ws, dtype=np.float32)
        out.append((name, x, w, stride, pad))
    return out


def _time(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeats=3, size="small", out=sys.stdout):
    rows = []
    worst_diff = 0.0
    for name, x, w, stride, pad in _cases(size):
        y_ref = _ref.conv3d_forward(x, w, stride, pad)
        gy = np.ones_like(y_ref)
        ops = [
            (f"forward  {name}",
             lambda b: b.conv3d_forward(x, w, stride, pad)),
            (f"grad_in  {name}",
             lambda b: b.conv3d_grad_input(gy, w, x.shape, stride, pad)),
            (f"grad_w   {name}",
             lambda b: b.conv3d_grad_weight(gy, x, w.shape, stride, pad)),
        ]
        for label, op in ops:
            t_ref = _time(lambda: op(_ref), repeats)
            row = {"op": label, "reference_s": t_ref}
            if _fast is not None:
                t_fast = _time(lambda: op(_fast), repeats)
                diff = float(np.max(np.abs(
                    np.asarray(op(_fast)) - np.asarray(op(_ref)))))
                worst_diff = max(worst_diff, diff)
                row.update(compiled_s=t_fast, speedup=t_ref / t_fast,
                           max_abs_diff=diff)
            rows.append(row)

    print(f"backends: reference"
          f"{', compiled' if _fast is not None else ' only (no compiled build)'}",
          file=out)
    header = f"{'op':<26} {'reference':>11}"
    if _fast is not None:
        header += f" {'compiled':>11} {'speedup':>8} {'max|diff|':>10}"
    print(header, file=out)
    print("-" * len(header), file=out)
    for r in rows:
        line = f"{r['op']:<26} {r['reference_s'] * 1e3:>9.2f}ms"
        if "compiled_s" in r:
            line += (f" {r['compiled_s'] * 1e3:>9.2f}ms"
                     f" {r['speedup']:>7.1f}x {r['max_abs_diff']:>10.2e}")
        print(line, file=out)
    if _fast is not None:
        print(f"worst agreement: {worst_diff:.2e}"
              f" ({'OK' if worst_diff < 1e-4 else 'MISMATCH'})", file=out)
        return 0 if worst_diff < 1e-4 else 1
    return 0


def main():
    ap = argparse.ArgumentParser(
        description="compare convolution kernel backends")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--size", choices=("small", "medium"), default="small")
    args = ap.parse_args()
    sys.exit(run(repeats=args.repeats, size=args.size))


if __name__ == "__main__":
    main()
