"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--dtype float32]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from isoprop.kernels import BACKENDS, load_backend


def cases(rng, dtype):
    n, d, h, m = 30, 32, 64, 150
    Q = rng.standard_normal((n, d)).astype(dtype)
    S = rng.uniform(-1, 1, (n, n)).astype(dtype)
    mask = (rng.random((n, n)) < 0.4).astype(np.uint8)
    np.fill_diagonal(mask, 1)
    U = rng.standard_normal((m, h)).astype(dtype)
    V = rng.standard_normal((n, h)).astype(dtype)
    w = rng.standard_normal(h).astype(dtype)
    gS = rng.standard_normal((m, n)).astype(dtype)

    def run(k):
        C, norms = k.cosine_matrix(Q, 1e-12)
        return {
            "cosine_matrix": lambda: k.cosine_matrix(Q, 1e-12),
            "cosine_matrix_backward": lambda: k.cosine_matrix_backward(Q, norms, C, S, 1e-12),
            "masked_softmax": lambda: k.masked_softmax(S, mask, 10.0),
            "masked_softmax_backward": lambda: k.masked_softmax_backward(
                k.masked_softmax(S, mask, 10.0), S, 10.0),
            "relation_scores": lambda: k.relation_scores(U, V, w, dtype(0.1)),
            "relation_scores_backward": lambda: k.relation_scores_backward(U, V, w, gS),
        }
    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = ap.parse_args(argv)
    dtype = np.dtype(args.dtype).type
    run = cases(np.random.default_rng(0), dtype)
    timings = {}
    for name in BACKENDS:
        try:
            backend = load_backend(name)
        except ImportError:
            print(f"backend {name!r} unavailable, skipped")
            continue
        for kernel, fn in run(backend).items():
            timings.setdefault(kernel, {})[name] = min(
                timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat * 1e6
    names = [b for b in BACKENDS if any(b in t for t in timings.values())]
    print(f"{'kernel':<26}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for kernel, t in timings.items():
        line = f"{kernel:<26}" + "".join(f"{t[n]:>16.1f}" for n in names)
        if len(names) == 2:
            line += f"{t[names[1]] / t[names[0]]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
