"""Compiled kernels versus their pure-Python twins.

Runs each hot kernel through both backends on the toy model's layer shapes,
checks the outputs are bit-identical and prints the timings::

    python benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from qdit import _backend, _fallback
from qdit import quantizer as q


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def qgemm_case(rng, batch, tokens, d_in, d_out, g):
    x = rng.standard_normal((batch, tokens, d_in)).astype(np.float32)
    w = (rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(np.float32)
    xq = q.dynamic_quantize_activation(x, g, 8)
    wq = q.group_quantize_weights(w, g, 4)
    colsum = q.weight_column_sums(wq)
    return x, xq, wq, colsum


def run_with(backend, fn):
    saved = q.kernels
    q.kernels = backend
    try:
        return fn()
    finally:
        q.kernels = saved


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--batch", type=int, default=64, help="samples per forward chunk")
    args = ap.parse_args(argv)

    if _backend.compiled is None:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    compiled = _backend.compiled
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'shape':<22}{'g':>4}{'compiled ms':>14}{'python ms':>12}{'speedup':>9}  identical")
    ok = True
    for d_in, d_out in ((288, 864), (288, 1152), (1152, 288)):
        for g in (8, 32, 72):
            x, xq, wq, colsum = qgemm_case(rng, args.batch, 16, d_in, d_out, g)
            shape = f"{args.batch}x16x{d_in}->{d_out}"

            def matmul():
                return q.quantized_matmul(xq, wq, colsum)

            def act():
                return q.dynamic_quantize_activation(x, g, 8)

            for name, fn in (("quantized_matmul", matmul), ("act_quantize", act)):
                a = run_with(compiled, fn)
                b = run_with(_fallback, fn)
                same = np.array_equal(getattr(a, "codes", a), getattr(b, "codes", b))
                ok &= same
                tc = best_of(lambda: run_with(compiled, fn), args.repeat)
                tp = best_of(lambda: run_with(_fallback, fn), args.repeat)
                print(f"{name:<18}{shape:<22}{g:>4}{tc * 1e3:>14.2f}{tp * 1e3:>12.2f}{tp / tc:>9.1f}  {same}")

    for n in (64, 128):
        m = rng.standard_normal((n, n))
        a0 = m + m.T

        def sweep(mod):
            a, v = a0.copy(), np.eye(n)
            mod.jacobi_sweep(a, v)
            return a

        same = np.array_equal(sweep(compiled), sweep(_fallback))
        ok &= same
        tc = best_of(lambda: sweep(compiled), args.repeat)
        tp = best_of(lambda: sweep(_fallback), args.repeat)
        print(f"{'jacobi_sweep':<18}{f'{n}x{n}':<22}{'-':>4}{tc * 1e3:>14.2f}{tp * 1e3:>12.2f}{tp / tc:>9.1f}  {same}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
