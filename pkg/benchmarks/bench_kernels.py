"""Time the compiled interpolation kernel against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--points N] [--repeat R]``.
"""

import argparse
import timeit

import numpy as np

from driftblend import _pykernels, kernels


def make_case(n, seed=0, k=8, ny=120, nx=160):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(k, ny, nx))
    slabs = rng.integers(0, k, size=(n, 4)).astype(np.int64)
    fx = rng.uniform(1.0, nx - 2.0, n)
    fy = rng.uniform(1.0, ny - 2.0, n)
    return data, slabs, fx, fy


def bench(fn, args, repeat):
    number = 5
    best = min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number
    return best


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, nargs="+", default=[64, 1024, 16384, 131072])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    backends = {"numpy": _pykernels.eval_slabs}
    if kernels.BACKEND == "cython":
        from driftblend import _ckernels

        backends["cython"] = _ckernels.eval_slabs
    else:
        print("compiled extension unavailable; timing the numpy fallback only")

    print(f"{'points':>8} " + " ".join(f"{name + ' (ms)':>14}" for name in backends) + f" {'speedup':>8}")
    for n in args.points:
        case = make_case(n)
        times = {name: bench(fn, case, args.repeat) for name, fn in backends.items()}
        speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
        print(f"{n:>8} " + " ".join(f"{1e3 * t:>14.3f}" for t in times.values()) + f" {speed:>8.1f}x")


if __name__ == "__main__":
    main()
