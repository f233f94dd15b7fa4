"""Parity between the compiled kernels and the pure numpy fallback."""

import numpy as np
import pytest

from liftdig import kernels
from liftdig.terrain import HeightField, fit_spline

pytestmark = pytest.mark.skipif(
    kernels.BACKEND != "c", reason="compiled kernel extension not built")

C = kernels.get_backend("c")
PY = kernels.get_backend("py")


def _spline_arrays(seed=0):
    rng = np.random.default_rng(seed)
    h = 0.5 + 0.2 * rng.standard_normal(64)
    spl = fit_spline(HeightField(x0=-1.0, dx=0.25, h=h))
    return spl.packed()


def test_spline_eval_parity():
    x0, dx, coef = _spline_arrays()
    xs = np.linspace(-2.0, 16.0, 257)  # includes out-of-domain clamping
    for x in xs:
        a = C.spline_eval(x0, dx, coef, x)
        b = PY.spline_eval(x0, dx, coef, x)
        assert np.allclose(a, b, rtol=0.0, atol=1e-14)


def test_sim_substeps_parity():
    x0, dx, coef = _spline_arrays(1)
    rng = np.random.default_rng(2)
    pv = np.array([80.0, 20.0, 1600.0, 0.6, 9.81,
                   4e4, 2e3, 5e2, 4e4, 2e3, 0.3, 2e3,
                   0.1, 0.2, 0.25, 240.0, 0.0])
    state = np.array([1.0, 0.3, 0.1, 8.0, -4.0, 0.5, 0.0, 0.0])
    for _ in range(5):
        u = rng.uniform(-2000, 2000, size=3)
        a, fa = C.sim_substeps(state, u, 10, 1 / 300.0, pv, x0, dx, coef)
        b, fb = PY.sim_substeps(state, u, 10, 1 / 300.0, pv, x0, dx, coef)
        assert fa == fb
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
        state = a


def test_lifted_rollout_parity():
    x0, dx, coef = _spline_arrays(3)
    rng = np.random.default_rng(4)
    n = 14
    A = np.eye(n) + 0.01 * rng.standard_normal((n, n))
    B = 0.01 * rng.standard_normal((n, 3))
    Bs = 0.01 * rng.standard_normal((n, 2))
    xi0 = rng.standard_normal(n)
    xi0[0] = 2.0
    U = rng.standard_normal((40, 3))
    ta, da = C.lifted_rollout(A, B, Bs, xi0, U, x0, dx, coef, -1.0, 14.0)
    tb, db = PY.lifted_rollout(A, B, Bs, xi0, U, x0, dx, coef, -1.0, 14.0)
    assert da == db
    np.testing.assert_allclose(ta[:da + 1], tb[:db + 1], rtol=1e-12, atol=1e-12)


def test_admm_run_parity():
    rng = np.random.default_rng(5)
    n, m = 12, 20
    M = rng.standard_normal((n, n))
    P = M.T @ M + 0.1 * np.eye(n)
    q = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    l = -rng.uniform(0.5, 2.0, m)
    u = rng.uniform(0.5, 2.0, m)
    rho = np.full(m, 0.1)
    sigma, alpha = 1e-6, 1.6
    K = P + sigma * np.eye(n) + (A.T * rho) @ A
    L = np.linalg.cholesky(K)
    ones = np.ones(n)
    em = np.ones(m)

    args = (L, P, q, A, l, u, rho, sigma, alpha)
    xa, za, ya = np.zeros(n), np.zeros(m), np.zeros(m)
    xb, zb, yb = np.zeros(n), np.zeros(m), np.zeros(m)
    ra = C.admm_run(*args, xa, za, ya, ones, em, 500, 1e-9, 1e-10, 25)
    rb = PY.admm_run(*args, xb, zb, yb, ones, em, 500, 1e-9, 1e-10, 25)
    assert ra[0] == rb[0] and ra[3] == rb[3]
    np.testing.assert_allclose(xa, xb, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ya, yb, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ra[1:3], rb[1:3], rtol=1e-8, atol=1e-12)
