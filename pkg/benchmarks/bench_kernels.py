"""Timing comparison of the compiled and pure-numpy kernel backends.

Runs each hot kernel (GELU forward/backward, row softmax forward/backward,
row layer norm forward/backward, Adam update) on shapes typical of the
sequence model: rows = batch * sequence length, columns = hidden width or
attention keys. Reports best-of-N wall time per call and the speedup of
the compiled backend, plus the max absolute disagreement between the two
backends on identical inputs as a parity check.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats 7] [--inner 20]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from losformer import kernels


def bench(fn, repeats: int, inner: int) -> float:
    fn()  # warmup
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def make_cases(rng):
    rows_small, rows_big = 2048, 8192
    cases = []
    for rows, label in ((rows_small, "2048"), (rows_big, "8192")):
        x = rng.normal(size=(rows, 288))
        dy = rng.normal(size=(rows, 288))
        gain = rng.normal(1.0, 0.05, size=288)
        bias = rng.normal(0.0, 0.05, size=288)
        scores = rng.normal(size=(rows, 256))
        p = kernels.get_backend("python").softmax_rows(scores)
        mean = x.mean(axis=1)
        rstd = 1.0 / np.sqrt(x.var(axis=1) + 1e-12)

        cases += [
            (f"gelu            {label}x288", lambda b, x=x: b.gelu(x), False),
            (f"gelu_backward   {label}x288",
             lambda b, x=x, dy=dy: b.gelu_backward(x, dy), False),
            (f"softmax         {label}x256", lambda b, s=scores: b.softmax_rows(s), False),
            (f"softmax_bwd     {label}x256",
             lambda b, p=p, dp=scores: b.softmax_rows_backward(p, dp), False),
            (f"layer_norm      {label}x288",
             lambda b, x=x, g=gain, bi=bias: b.layer_norm_rows(x, g, bi, 1e-12), False),
            (f"layer_norm_bwd  {label}x288",
             lambda b, x=x, g=gain, m=mean, r=rstd, dy=dy:
             b.layer_norm_rows_backward(x, g, m, r, dy), False),
        ]

    # adam mutates its buffers in place; arithmetic cost is value-independent,
    # so each backend just keeps updating its own state
    shape = (rows_big, 288)
    adam_state = {
        name: [rng.normal(size=shape), rng.normal(size=shape),
               np.zeros(shape), np.zeros(shape), [0]]
        for name in kernels.available_backends()}

    def adam_case(b, backend_name):
        param, grad, m, v, step = adam_state[backend_name]
        step[0] += 1
        b.adam_update(param, grad, m, v, step[0], 3e-4, 0.9, 0.999, 1e-8, 0.003)

    cases.append((f"adam_update     {shape[0]}x{shape[1]}", adam_case, True))
    return cases


def parity(fn) -> float:
    py = fn(kernels.get_backend("python"))
    cc = fn(kernels.get_backend("c"))
    if not isinstance(py, tuple):
        py, cc = (py,), (cc,)
    return max(float(np.abs(np.asarray(a) - np.asarray(b)).max())
               for a, b in zip(py, cc))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7)
    parser.add_argument("--inner", type=int, default=20)
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    print(f"backends available: {', '.join(backends)}")
    if "c" not in backends:
        print("compiled backend not built; timing the python backend only")

    rng = np.random.default_rng(0)
    cases = make_cases(rng)

    header = f"{'kernel':<28}{'python':>12}{'c':>12}{'speedup':>9}{'max |diff|':>12}"
    print(header)
    print("-" * len(header))
    for name, fn, takes_name in cases:
        times = {}
        for backend_name in backends:
            b = kernels.get_backend(backend_name)
            call = (lambda b=b, n=backend_name: fn(b, n)) if takes_name else (lambda b=b: fn(b))
            times[backend_name] = bench(call, args.repeats, args.inner)
        py_us = times["python"] * 1e6
        if "c" in times:
            c_us = times["c"] * 1e6
            diff = "-" if takes_name else f"{parity(fn):.3e}"
            print(f"{name:<28}{py_us:>10.1f}us{c_us:>10.1f}us"
                  f"{py_us / c_us:>8.2f}x{diff:>12}")
        else:
            print(f"{name:<28}{py_us:>10.1f}us{'-':>12}{'-':>9}{'-':>12}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
