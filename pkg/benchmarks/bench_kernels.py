"""Timings for the hot kernels: compiled extension vs NumPy fallback.

Run: python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from areil.corpus import build_graph
from areil.numcore import kernels


def random_graph(num_users, num_items, per_user, rng):
    pairs = set()
    for u in range(num_users):
        for i in rng.choice(num_items, size=per_user, replace=False):
            pairs.add((u, int(i)))
    return build_graph(sorted(pairs), num_users, num_items)


def timeit(fn, repeats=10):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_spmm(rng):
    print(f"{'nodes':>8} {'edges':>9} {'width':>6} {'numpy':>10} "
          f"{'compiled':>10} {'speedup':>8}")
    for num_users, num_items, per_user, width in (
        (1_000, 1_000, 10, 64),
        (4_000, 8_000, 20, 64),
        (16_000, 50_000, 15, 192),
    ):
        graph = random_graph(num_users, num_items, per_user, rng)
        x = rng.standard_normal((graph.num_nodes, width))
        out = np.empty_like(x)
        t_np = timeit(lambda: kernels.spmm_numpy(
            graph.indptr, graph.indices, graph.data, x, out))
        if kernels.HAVE_COMPILED:
            t_c = timeit(lambda: kernels.spmm_compiled(
                graph.indptr, graph.indices, graph.data, x, out))
            ref = kernels.spmm_numpy(graph.indptr, graph.indices, graph.data, x)
            diff = np.abs(kernels.spmm_compiled(
                graph.indptr, graph.indices, graph.data, x) - ref).max()
            assert diff < 1e-12, f"backend disagreement: {diff}"
            print(f"{graph.num_nodes:>8} {graph.num_edges:>9} {width:>6} "
                  f"{t_np * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms {t_np / t_c:>7.2f}x")
        else:
            print(f"{graph.num_nodes:>8} {graph.num_edges:>9} {width:>6} "
                  f"{t_np * 1e3:>8.2f}ms {'n/a':>10} {'':>8}")


def bench_adam(rng):
    print(f"\n{'size':>10} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for size in (100_000, 2_000_000):
        value = rng.standard_normal(size)
        grad = rng.standard_normal(size)
        m = np.zeros(size)
        v = np.zeros(size)
        args = (0.001, 0.9, 0.999, 1e-8, 0.1, 0.001)
        t_np = timeit(lambda: kernels.adam_update_numpy(
            value.copy(), grad, m.copy(), v.copy(), *args), repeats=5)
        if kernels.HAVE_COMPILED:
            from areil.numcore import _ckernels
            t_c = timeit(lambda: _ckernels.adam_update(
                value.copy(), grad, m.copy(), v.copy(), *args), repeats=5)
            va, ma, va2 = value.copy(), m.copy(), v.copy()
            vb, mb, vb2 = value.copy(), m.copy(), v.copy()
            kernels.adam_update_numpy(va, grad, ma, va2, *args)
            _ckernels.adam_update(vb, grad, mb, vb2, *args)
            assert np.array_equal(va, vb), "adam backends disagree"
            print(f"{size:>10} {t_np * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms "
                  f"{t_np / t_c:>7.2f}x")
        else:
            print(f"{size:>10} {t_np * 1e3:>8.2f}ms {'n/a':>10}")


def main():
    print(f"active backend: {kernels.backend_name()} "
          f"(compiled available: {kernels.HAVE_COMPILED})\n")
    rng = np.random.default_rng(7)
    bench_spmm(rng)
    bench_adam(rng)


if __name__ == "__main__":
    main()
