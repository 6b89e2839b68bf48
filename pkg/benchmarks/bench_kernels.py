"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from chunksim import kernels
from chunksim.ctc import extend_labels


def ctc_case(rng, T, L, C=9):
    x = rng.normal(size=(T, C))
    logp = x - np.logaddexp.reduce(x, axis=1, keepdims=True)
    return logp, extend_labels(rng.integers(1, C, size=L))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    cases = [("ctc T=100 L=7", lambda b, c=ctc_case(rng, 100, 7): kernels.ctc_forward_backward(*c, backend=b)),
             ("ctc T=400 L=30", lambda b, c=ctc_case(rng, 400, 30): kernels.ctc_forward_backward(*c, backend=b)),
             ("edit 10x10", lambda b, a=list(rng.integers(0, 8, 10)), r=list(rng.integers(0, 8, 10)):
                 kernels.edit_distance(a, r, backend=b)),
             ("edit 200x200", lambda b, a=list(rng.integers(0, 8, 200)), r=list(rng.integers(0, 8, 200)):
                 kernels.edit_distance(a, r, backend=b))]
    print(f"{'case':<16}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases:
        times = [min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3 for b in backends]
        row = f"{name:<16}" + "".join(f"{t:>10.3f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)
    if len(backends) == 1:
        print("compiled extension not available; only the fallback was timed")


if __name__ == "__main__":
    main()
