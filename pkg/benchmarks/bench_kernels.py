"""Benchmark the jitted hot kernels against their pure-Python/numpy
fallbacks.

The compiled path is the default; ``RACE_WFL_NO_NUMBA=1`` selects the
fallback globally.  This script times both sides in one process: for
scalar-loop kernels the fallback is the same function uncompiled
(``fn.py_func``), for the attention softmax it is the vectorized numpy
twin.

Run:  python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from race_wfl.accel import USE_NUMBA
from race_wfl.platoon import IdmParams, init_platoon, _integrate_kernel
from race_wfl.resource_alloc import _allocation_core
from race_wfl.tsfen import (
    _attn_softmax_backward_nb, _attn_softmax_backward_np,
    _attn_softmax_nb, _attn_softmax_np,
)


def timeit(fn, repeat):
    fn()  # warm-up / compile
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_platoon(repeat):
    p = IdmParams()
    rng = np.random.default_rng(0)
    state = init_platoon(20, rng)
    targets = np.full(500, 18.0)

    def run(kernel):
        x = state.positions.copy()
        v = state.speeds.copy()
        acc = np.empty_like(x)
        tx = np.empty((501, len(x)))
        tv = np.empty_like(tx)
        kernel(x, v, acc, state.lengths, p.a_max, p.b_max, p.d_min,
               p.t_min, p.v_des, p.sensitivity_exponent,
               p.update_interval, p.substeps, targets, tx, tv)

    jit_t = timeit(lambda: run(_integrate_kernel), repeat)
    py_t = timeit(lambda: run(_integrate_kernel.py_func), max(1, repeat // 8))
    return "platoon 500-step integration", jit_t, py_t


def bench_allocation(repeat):
    rng = np.random.default_rng(1)
    cases = []
    for _ in range(200):
        cases.append((
            10 ** rng.uniform(-29, -27),          # kappa
            10 ** rng.uniform(7, 9),              # mu * zeta
            10 ** rng.uniform(8, 9.5),            # cpu_hz
            10 ** rng.uniform(5, 7),              # bits
            10 ** rng.uniform(5, 7),              # bandwidth
            10 ** rng.uniform(-2, 0.5),           # power
            10 ** rng.uniform(2, 8),              # gain
            10 ** rng.uniform(-3, -1),            # e_max
        ))

    def run(core):
        for (kappa, mz, g, bits, bw, p, gain, emax) in cases:
            core(kappa, mz, g, bits, bw, p, gain, emax, 1e-6, 1e-6 * emax,
                 100, 1e3)

    jit_t = timeit(lambda: run(_allocation_core), repeat)
    py_t = timeit(lambda: run(_allocation_core.py_func), max(1, repeat // 8))
    return "resource allocation, 200 devices", jit_t, py_t


def bench_attention(repeat):
    rng = np.random.default_rng(2)
    scores = rng.standard_normal((160, 8, 20, 20))
    grad = rng.standard_normal(scores.shape)

    def run_nb():
        attn = _attn_softmax_nb(scores.copy())
        _attn_softmax_backward_nb(attn, grad.copy(), 0.3535)

    def run_np():
        attn = _attn_softmax_np(scores.copy())
        _attn_softmax_backward_np(attn, grad.copy(), 0.3535)

    if USE_NUMBA:
        jit_t = timeit(run_nb, repeat)
    else:
        jit_t = float("nan")
    py_t = timeit(run_np, repeat)
    return "attention softmax fwd+bwd (batch 32)", jit_t, py_t


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not USE_NUMBA:
        print("numba disabled (RACE_WFL_NO_NUMBA=1): jitted column shows "
              "the fallback too\n")
    rows = [bench_platoon(args.repeat), bench_allocation(args.repeat),
            bench_attention(args.repeat)]
    print(f"{'kernel':<42} {'jitted':>12} {'fallback':>12} {'speedup':>9}")
    for name, jit_t, py_t in rows:
        speed = py_t / jit_t if jit_t == jit_t and jit_t > 0 else float("nan")
        print(f"{name:<42} {jit_t * 1e3:>10.3f}ms {py_t * 1e3:>10.3f}ms "
              f"{speed:>8.1f}x")


if __name__ == "__main__":
    main()
