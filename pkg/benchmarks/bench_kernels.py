"""Timing comparison of the two kernel implementation tables.

Every hot kernel ships twice: a plain numpy version and the same function
compiled with numba. This script times both tables on identical inputs
across a few sequence lengths and prints per-call times with the speedup.
The compiled table is warmed up (triggering jit compilation) before any
timing. If numba failed to import, only the numpy column is reported.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --lengths 128 512 2048 --repeats 7
"""

import argparse
import time

import numpy as np

from hreb.kernels import kernel_impls


def build_cases(rng, n, d, h, c):
    """One (args tuple) per kernel name, shared across both tables."""
    x = rng.standard_normal((n, d))
    alpha = rng.uniform(0.05, 0.95, d)
    h0 = rng.standard_normal(d)
    dout = rng.standard_normal((n, d))

    xw = rng.standard_normal((n, 4 * h))
    u = rng.standard_normal((h, 4 * h)) * 0.1
    b4 = rng.standard_normal(4 * h)
    dhid = rng.standard_normal((n, h))

    emissions = rng.standard_normal((n, c))
    trans = rng.standard_normal((c, c))
    start = rng.standard_normal(c)
    stop = rng.standard_normal(c)

    numpy_table = kernel_impls()["numpy"]
    hist = numpy_table["ema_forward"](x, alpha, h0)
    hidden, gates, cells = numpy_table["lstm_forward"](xw, u, b4)
    log_z, fwd = numpy_table["crf_forward"](emissions, trans, start, stop)

    return [
        ("ema_forward", (x, alpha, h0)),
        ("ema_backward", (x, alpha, h0, hist, dout)),
        ("lstm_forward", (xw, u, b4)),
        ("lstm_backward", (gates, cells, hidden, u, dhid)),
        ("crf_forward", (emissions, trans, start, stop)),
        ("crf_backward", (emissions, trans, start, stop, fwd, log_z, 1.0)),
        ("viterbi", (emissions, trans, start, stop)),
    ]


def time_call(fn, args, repeats, inner):
    """Best-of-repeats mean time per call, in seconds."""
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def fmt(seconds):
    if seconds >= 1e-3:
        return f"{seconds * 1e3:8.3f} ms"
    return f"{seconds * 1e6:8.2f} us"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--lengths", type=int, nargs="+",
                        default=[64, 256],
                        help="sequence lengths to benchmark")
    parser.add_argument("--dim", type=int, default=32,
                        help="feature width for the EMA kernels")
    parser.add_argument("--hidden", type=int, default=32,
                        help="LSTM hidden width")
    parser.add_argument("--classes", type=int, default=16,
                        help="CRF class count")
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repetitions (best is kept)")
    parser.add_argument("--inner", type=int, default=10,
                        help="calls per timed repetition")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    tables = kernel_impls()
    have_numba = bool(tables["numba"])
    if not have_numba:
        print("numba unavailable: timing the numpy table only")

    header = f"{'kernel':<14} {'n':>6} {'numpy':>12}"
    if have_numba:
        header += f" {'numba':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))

    for n in args.lengths:
        rng = np.random.default_rng(args.seed)
        cases = build_cases(rng, n, args.dim, args.hidden, args.classes)
        for name, call_args in cases:
            t_np = time_call(tables["numpy"][name], call_args,
                             args.repeats, args.inner)
            line = f"{name:<14} {n:>6} {fmt(t_np):>12}"
            if have_numba:
                jit_fn = tables["numba"][name]
                jit_fn(*call_args)  # compile outside the timed region
                t_nb = time_call(jit_fn, call_args, args.repeats, args.inner)
                line += f" {fmt(t_nb):>12} {t_np / t_nb:>7.1f}x"
            print(line)
        print()


if __name__ == "__main__":
    main()
