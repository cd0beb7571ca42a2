"""Time the numba and numpy kernel backends side by side.

    python benchmarks/bench_kernels.py [--n 20000] [--dim 64] [--repeat 5]
"""

import argparse
import time

import numpy as np

from distann.kernels import backend_module
from distann.vamana import UNLIMITED


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, dim)).astype(np.float32)
    q = rng.standard_normal(dim).astype(np.float32)
    cents = np.ascontiguousarray(data[rng.choice(n, 256, replace=False)])
    codes = rng.integers(0, 256, (n, 16), dtype=np.uint8)
    q_code = rng.integers(0, 256, 16, dtype=np.uint8)
    table = rng.random((16, 256, 256), dtype=np.float32)
    small = np.ascontiguousarray(data[:2000])
    order = rng.permutation(small.shape[0]).astype(np.int64)
    # one shared graph so both backends search the same structure
    adj, deg = backend_module("numba").build_vamana(data, 32, 64, 1.2, rng.permutation(n).astype(np.int64),
                                                    0, 2, 41)
    entries = np.array([0], dtype=np.int64)
    qs = rng.standard_normal((50, dim)).astype(np.float32)
    return {
        "l2_to_rows": lambda k: k.l2_to_rows(data, q),
        "assign_nearest(256)": lambda k: k.assign_nearest(data, cents),
        "sdc_rows": lambda k: k.sdc_rows(codes, q_code, table),
        "greedy_search x50": lambda k: [k.greedy_search(data, adj, deg, entries, x, 64, 10, UNLIMITED) for x in qs],
        "build_vamana(2000)": lambda k: k.build_vamana(small, 16, 32, 1.2, order, 0, 2, 20),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    nb, npk = backend_module("numba"), backend_module("numpy")
    print(f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, fn in cases(a.n, a.dim).items():
        t_nb = best_of(lambda: fn(nb), a.repeat)
        t_np = best_of(lambda: fn(npk), 1 if name.startswith("build") else a.repeat)
        print(f"{name:<22}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
