"""Compare the jitted ring kernels against the pure-numpy fallback.

Run twice to see both backends:

    python benchmarks/bench_kernels.py
    MPCADAPTER_NO_NUMBA=1 python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from mpcadapter import kernels


def bench(fn, *args, repeat=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.Generator(np.random.PCG64(0))
    print(f"backend: {kernels.backend()}")
    for n in (64, 128, 256, 512):
        a = rng.integers(0, 1 << 63, size=(n, n), dtype=np.uint64)
        b = rng.integers(0, 1 << 63, size=(n, n), dtype=np.uint64)
        t = bench(kernels.matmul_u64, a, b)
        print(f"matmul_u64 {n}x{n}: {t * 1e3:8.2f} ms")
    for batch, n in ((8, 64), (16, 128)):
        a = rng.integers(0, 1 << 63, size=(batch, n, n), dtype=np.uint64)
        b = rng.integers(0, 1 << 63, size=(batch, n, n), dtype=np.uint64)
        t = bench(kernels.matmul_u64, a, b)
        print(f"matmul_u64 batch {batch}x{n}x{n}: {t * 1e3:8.2f} ms")
    x = rng.integers(0, 1 << 63, size=1 << 20, dtype=np.uint64)
    t = bench(kernels.arith_shift_right, x, 16)
    print(f"arith_shift_right 1M: {t * 1e3:8.2f} ms")


if __name__ == "__main__":
    main()
