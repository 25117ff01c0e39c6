"""Compare the compiled and numpy ReLU kernels.

    python benchmarks/bench_kernels.py [--m 400] [--n 1600] [--repeat 20]

Times the arc-cosine Gram (kernel + derivative) and one full population /
empirical training step with each backend. The masked backprop is numpy in
both backends; a compiled loop for it ran about 2.4x slower than numpy at
n=1600, m=400 and was dropped.
"""
import argparse
import time

import numpy as np

from tlab.relu import _pykernels
from tlab.relu import model as rm

try:
    from tlab.relu import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return min(ts)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--m", type=int, default=400)
    ap.add_argument("--m-star", type=int, default=50)
    ap.add_argument("--d", type=int, default=50)
    ap.add_argument("--n", type=int, default=1600)
    ap.add_argument("--repeat", type=int, default=20)
    a = ap.parse_args()
    rng = np.random.default_rng(0)
    W = rm.random_directions(a.m, a.d, rng)
    U = W @ W.T
    X = rng.standard_normal((a.n, a.d))
    c = rng.standard_normal(a.m)
    backends = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    teacher = rm.make_teacher_pair(a.m_star, a.d, 0.0, 1).target
    print(f"m={a.m} m*={a.m_star} d={a.d} n={a.n}, best of {a.repeat}")
    base = {}
    for name, mod in backends:
        K, Kp = mod.arccos_kernel_matrix(U, True)
        t_gram = best_of(lambda: mod.arccos_kernel_matrix(U, True), a.repeat)
        # full steps with this backend patched in
        saved = rm.arccos_kernel_matrix
        rm.arccos_kernel_matrix = mod.arccos_kernel_matrix
        pop = rm.PopulationObjective(teacher)
        emp = rm.EmpiricalObjective(X, teacher(X))
        t_pop = best_of(lambda: pop(W, c), a.repeat)
        t_emp = best_of(lambda: emp(W, c), max(3, a.repeat // 4))
        rm.arccos_kernel_matrix = saved
        row = {"gram": t_gram, "pop_step": t_pop, "emp_step": t_emp}
        if not base:
            base = row
        print(f"{name:>7}: " + "  ".join(f"{k} {v * 1e3:7.3f} ms (x{base[k] / v:4.2f})" for k, v in row.items()))
        if name == "cython":
            K0, P0 = _pykernels.arccos_kernel_matrix(U)
            print(f"         max |dK| {np.abs(K - K0).max():.1e}, max |dK'| {np.abs(Kp - P0).max():.1e}")


if __name__ == "__main__":
    main()
