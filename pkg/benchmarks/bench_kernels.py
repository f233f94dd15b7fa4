"""Benchmark the compiled kernels against the pure numpy fallback.

Run from the repository root after building the extension:

    python benchmarks/bench_kernels.py

Each kernel is timed on a representative workload; outputs are checked to
agree between backends before timing.
"""

import time

import numpy as np

from liftdig import kernels
from liftdig.simulator import SimParams
from liftdig.terrain import HeightField, fit_spline


def _timeit(fn, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_spline(backend, x0, dx, coef, xs):
    def run():
        for x in xs:
            backend.spline_eval(x0, dx, coef, x)
    return _timeit(run)


def bench_sim(backend, state, u, pv, x0, dx, coef):
    def run():
        backend.sim_substeps(state, u, 3000, 1 / 300.0, pv, x0, dx, coef)
    return _timeit(run)


def bench_rollout(backend, A, B, Bs, xi0, U, x0, dx, coef):
    def run():
        for _ in range(50):
            backend.lifted_rollout(A, B, Bs, xi0, U, x0, dx, coef, -1e9, 1e9)
    return _timeit(run)


def bench_admm(backend, args):
    (L, P, q, A, l, u, rho, sigma, alpha, dinv, einv) = args
    n, m = P.shape[0], A.shape[0]

    def run():
        x, z, y = np.zeros(n), np.zeros(m), np.zeros(m)
        backend.admm_run(L, P, q, A, l, u, rho, sigma, alpha, x, z, y,
                         dinv, einv, 500, 0.0, 0.0, 25)
    return _timeit(run)


def main():
    if kernels.BACKEND != "c":
        print("compiled kernel extension not built; nothing to compare")
        print("build it with: python setup.py build_ext --inplace")
        return

    c = kernels.get_backend("c")
    py = kernels.get_backend("py")
    rng = np.random.default_rng(0)

    spl = fit_spline(HeightField(x0=-4.0, dx=0.02,
                                 h=0.3 * rng.standard_normal(401)))
    x0, dx, coef = spl.packed()

    rows = []

    xs = rng.uniform(-4.0, 4.0, 20000)
    rows.append(("spline_eval (20k points)",
                 bench_spline(py, x0, dx, coef, xs),
                 bench_spline(c, x0, dx, coef, xs)))

    pv = SimParams().packed()
    state = np.array([0.0, -0.05, 0.1, 30.0, -10.0, 1.0, 0.0, 0.0])
    u = np.array([2000.0, 3000.0, 50.0])
    a, fa = c.sim_substeps(state, u, 100, 1 / 300.0, pv, x0, dx, coef)
    b, fb = py.sim_substeps(state, u, 100, 1 / 300.0, pv, x0, dx, coef)
    assert fa == fb and np.allclose(a, b, rtol=1e-12)
    rows.append(("sim_substeps (3000 steps)",
                 bench_sim(py, state, u, pv, x0, dx, coef),
                 bench_sim(c, state, u, pv, x0, dx, coef)))

    n = 14
    A = np.eye(n) * 0.99 + 0.01 * rng.standard_normal((n, n))
    B = 0.01 * rng.standard_normal((n, 3))
    Bs = 0.01 * rng.standard_normal((n, 2))
    xi0 = rng.standard_normal(n)
    U = rng.standard_normal((50, 3))
    rows.append(("lifted_rollout (50 x 50 steps)",
                 bench_rollout(py, A, B, Bs, xi0, U, x0, dx, coef),
                 bench_rollout(c, A, B, Bs, xi0, U, x0, dx, coef)))

    nq, mq = 381, 981
    M = rng.standard_normal((40, nq))
    P = np.ascontiguousarray(M.T @ M / 40 + 1e-3 * np.eye(nq))
    Aq = np.ascontiguousarray(rng.standard_normal((mq, nq)))
    q = rng.standard_normal(nq)
    l = -np.ones(mq)
    u2 = np.ones(mq)
    rho = np.full(mq, 0.1)
    K = P + 1e-6 * np.eye(nq) + (Aq.T * rho) @ Aq
    L = np.ascontiguousarray(np.linalg.cholesky(K))
    args = (L, P, q, Aq, l, u2, rho, 1e-6, 1.6, np.ones(nq), np.ones(mq))
    rows.append(("admm_run (500 iters, n=381 m=981)",
                 bench_admm(py, args), bench_admm(c, args)))

    print(f"kernel backend comparison (pure numpy vs compiled)")
    print(f"{'kernel':36s} {'pure (ms)':>10s} {'compiled (ms)':>14s} {'speedup':>8s}")
    for name, t_py, t_c in rows:
        print(f"{name:36s} {t_py * 1e3:10.2f} {t_c * 1e3:14.2f} "
              f"{t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
