"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 200]

Each kernel is called once before timing so JIT compilation is excluded.
"""
import argparse
import time

import numpy as np

from dro_pref import _kernels as K


def timeit(fn, args, repeat):
    fn(*args)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat * 1e6


def cases(rng):
    n, d, N = 64, 8, 20000
    A = rng.standard_normal((N, d))
    off = np.zeros(N)
    idx = rng.integers(0, N, n)
    w = rng.standard_normal(d) * 0.3
    losses = rng.random(n)
    p = np.full(n, 1.0 / n)
    rows = rng.random((10000, 64))
    return [
        ("tv_shift n=64", K.tv_shift_nb, K.tv_shift_np, (p, losses, 0.2, True)),
        ("chi2_max n=64", K.chi2_max_nb, K.chi2_max_np, (losses, p, 0.2, K.CHI2_TOL, K.CHI2_MAX_ITER)),
        ("tv_max_rows 10000x64", K.tv_max_rows_nb, K.tv_max_rows_np, (rows, 0.2)),
        ("robust step tv n=64 d=8", K.robust_logistic_step_nb, K.robust_logistic_step_np,
         (A, off, idx, w, 1.0, 0.2, K.TV, 0.0)),
        ("robust step chi2 n=64 d=8", K.robust_logistic_step_nb, K.robust_logistic_step_np,
         (A, off, idx, w, 1.0, 0.2, K.CHI2, 0.0)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':28s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}")
    for name, nb, npf, a in cases(rng):
        t_nb = timeit(nb, a, args.repeat)
        t_np = timeit(npf, a, args.repeat)
        print(f"{name:28s} {t_nb:10.1f} {t_np:10.1f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
