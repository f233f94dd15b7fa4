"""QP solver correctness against analytic cases and an active-set oracle."""

import itertools

import numpy as np
import pytest

from liftdig.qp import (QpSolution, QuadProgram, SolverSettings, dump_problem,
                        kkt_residuals, load_problem, solve)


def random_qp(rng, n, m):
    """Random strictly convex QP with finite two-sided constraints."""
    M = rng.standard_normal((n, n))
    P = M.T @ M + 0.1 * np.eye(n)
    q = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    center = A @ rng.standard_normal(n) * 0.1
    half = rng.uniform(0.1, 1.5, m)
    return QuadProgram(P=P, q=q, A=A, l=center - half, u=center + half)


def active_set_oracle(prob, tol=1e-8):
    """Optimal objective by enumerating active sets (and their sides).

    Exponential in the row count; intended for small problems only.
    """
    n, m = prob.n, prob.m
    best = None
    for k in range(0, min(n, m) + 1):
        for subset in itertools.combinations(range(m), k):
            for sides in itertools.product((0, 1), repeat=k):
                b = np.array([prob.l[i] if s == 0 else prob.u[i]
                              for i, s in zip(subset, sides)])
                Ar = prob.A[list(subset)]
                K = np.zeros((n + k, n + k))
                K[:n, :n] = prob.P
                K[:n, n:] = Ar.T
                K[n:, :n] = Ar
                rhs = np.concatenate([-prob.q, b])
                try:
                    sol = np.linalg.solve(K, rhs)
                except np.linalg.LinAlgError:
                    continue
                z = sol[:n]
                nu = sol[n:]
                Az = prob.A @ z
                if np.any(Az < prob.l - tol) or np.any(Az > prob.u + tol):
                    continue
                ok = all((prob.l[i] == prob.u[i])
                         or (s == 1 and nu_i >= -tol)
                         or (s == 0 and nu_i <= tol)
                         for i, s, nu_i in zip(subset, sides, nu))
                if not ok:
                    continue
                obj = prob.objective(z)
                if best is None or obj < best:
                    best = obj
    return best


class TestAnalyticCases:
    def test_unconstrained_quadratic(self):
        n = 6
        prob = QuadProgram(P=np.eye(n), q=-np.ones(n),
                           A=np.zeros((0, n)), l=np.zeros(0), u=np.zeros(0))
        sol = solve(prob)
        assert sol.status == "solved"
        np.testing.assert_allclose(sol.z, np.ones(n), atol=1e-8)

    def test_clamped_box(self):
        n = 6
        prob = QuadProgram(P=np.eye(n), q=-np.ones(n), A=np.eye(n),
                           l=np.zeros(n), u=np.full(n, 0.5))
        sol = solve(prob)
        assert sol.status == "solved"
        np.testing.assert_allclose(sol.z, np.full(n, 0.5), atol=1e-7)

    def test_equality_constraint(self):
        # min 0.5|z|^2 s.t. z0 + z1 = 1 -> z = (0.5, 0.5)
        prob = QuadProgram(P=np.eye(2), q=np.zeros(2),
                           A=np.array([[1.0, 1.0]]), l=np.array([1.0]),
                           u=np.array([1.0]))
        sol = solve(prob)
        np.testing.assert_allclose(sol.z, [0.5, 0.5], atol=1e-7)


class TestRandomAgainstOracle:
    def test_small_problems_match_oracle(self):
        rng = np.random.default_rng(0)
        for k in range(25):
            n = int(rng.integers(2, 7))
            m = int(rng.integers(1, 9))
            prob = random_qp(rng, n, m)
            sol = solve(prob, tol=1e-8)
            assert sol.status == "solved", f"case {k}: {sol.status}"
            ref = active_set_oracle(prob)
            assert ref is not None
            assert abs(sol.objective - ref) < 1e-6, f"case {k}"

    def test_larger_problems_kkt(self):
        rng = np.random.default_rng(1)
        for k in range(15):
            n = int(rng.integers(10, 51))
            m = int(rng.integers(n // 2, 101))
            prob = random_qp(rng, n, m)
            sol = solve(prob, tol=1e-6)
            pri, dua, comp = kkt_residuals(prob, sol)
            assert sol.status == "solved", f"case {k}"
            assert pri <= 1e-6 and dua <= 1e-6, f"case {k}: {pri:.2e} {dua:.2e}"


class TestKktResiduals:
    def test_exact_solution_zero(self):
        prob = QuadProgram(P=np.eye(3), q=-np.ones(3), A=np.eye(3),
                           l=np.zeros(3), u=np.full(3, 0.5))
        sol = QpSolution(z=np.full(3, 0.5), y=np.full(3, 0.5),
                         status="solved", iterations=0,
                         primal_residual=0, dual_residual=0)
        pri, dua, comp = kkt_residuals(prob, sol)
        assert pri == 0.0
        assert dua < 1e-15
        assert comp < 1e-15

    def test_perturbation_scales_linearly(self):
        prob = QuadProgram(P=np.eye(3), q=-np.ones(3), A=np.eye(3),
                           l=np.zeros(3), u=np.full(3, 0.5))
        z = np.full(3, 0.5)
        y = np.full(3, 0.5)
        d = np.array([0.01, 0.02, 0.04])
        r1 = kkt_residuals(prob, QpSolution(z + d, y, "", 0, 0, 0))[0]
        r2 = kkt_residuals(prob, QpSolution(z + 2 * d, y, "", 0, 0, 0))[0]
        assert abs(r2 - 2.0 * r1) < 1e-12

    def test_solver_self_consistency(self):
        rng = np.random.default_rng(2)
        prob = random_qp(rng, 12, 20)
        sol = solve(prob, tol=1e-7)
        pri, dua, comp = kkt_residuals(prob, sol)
        assert pri <= 1e-7 and dua <= 1e-7


class TestSolverProperties:
    def test_warm_start_matches_cold(self):
        rng = np.random.default_rng(3)
        prob = random_qp(rng, 15, 30)
        cold = solve(prob, tol=1e-7)
        warm = solve(prob, warm=cold, tol=1e-7)
        assert warm.status == "solved"
        np.testing.assert_allclose(warm.z, cold.z, atol=1e-6)
        assert warm.iterations <= cold.iterations

    def test_scaling_invariance_of_argmin(self):
        rng = np.random.default_rng(4)
        prob = random_qp(rng, 8, 12)
        alpha = 37.5
        scaled = QuadProgram(P=alpha * prob.P, q=alpha * prob.q, A=prob.A,
                             l=prob.l, u=prob.u)
        s1 = solve(prob, tol=1e-8)
        s2 = solve(scaled, tol=1e-8)
        np.testing.assert_allclose(s1.z, s2.z, atol=1e-6)

    def test_residuals_eventually_decrease(self):
        # Semidefinite cost slows convergence enough to observe the
        # residual trend across several check chunks.
        rng = np.random.default_rng(5)
        n, m = 40, 80
        M = rng.standard_normal((8, n))
        P = M.T @ M
        A = rng.standard_normal((m, n))
        center = A @ rng.standard_normal(n) * 0.1
        half = rng.uniform(0.05, 0.5, m)
        prob = QuadProgram(P=P, q=rng.standard_normal(n), A=A,
                           l=center - half, u=center + half)
        st = SolverSettings(polish=False)
        sol = solve(prob, tol=1e-13, max_iter=3000, settings=st)
        hist = sol.residual_history
        assert len(hist) >= 2
        first = hist[0][1] + hist[0][2]
        last = hist[-1][1] + hist[-1][2]
        assert last < first

    def test_max_iter_status(self):
        rng = np.random.default_rng(6)
        prob = random_qp(rng, 20, 40)
        st = SolverSettings(polish=False)
        sol = solve(prob, tol=1e-14, max_iter=50, settings=st)
        assert sol.status == "max_iter"
        assert sol.iterations == 50

    def test_primal_infeasibility_detected(self):
        # z0 pinned to 0 and simultaneously required >= 1.
        prob = QuadProgram(P=np.eye(2), q=np.zeros(2),
                           A=np.array([[1.0, 0.0], [1.0, 0.0]]),
                           l=np.array([0.0, 1.0]),
                           u=np.array([0.0, np.inf]))
        sol = solve(prob, tol=1e-6, max_iter=4000)
        assert sol.status == "infeasible"

    def test_zero_cost_accepted(self):
        # Pure feasibility with P = 0, q = 0.
        prob = QuadProgram(P=np.zeros((3, 3)), q=np.zeros(3), A=np.eye(3),
                           l=np.zeros(3), u=np.ones(3))
        sol = solve(prob)
        assert sol.status == "solved"
        assert np.all(sol.z >= -1e-7) and np.all(sol.z <= 1 + 1e-7)


class TestProblemIo:
    def test_dump_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        prob = random_qp(rng, 5, 8)
        prob = QuadProgram(P=prob.P, q=prob.q, A=prob.A,
                           l=np.where(np.arange(8) % 3 == 0, -np.inf, prob.l),
                           u=prob.u)
        path = tmp_path / "qp.json"
        dump_problem(prob, path)
        loaded = load_problem(path)
        np.testing.assert_array_equal(loaded.P, prob.P)
        np.testing.assert_array_equal(loaded.q, prob.q)
        np.testing.assert_array_equal(loaded.A, prob.A)
        np.testing.assert_array_equal(loaded.l, prob.l)
        np.testing.assert_array_equal(loaded.u, prob.u)

    def test_invariant_checks(self):
        with pytest.raises(ValueError, match="symmetric"):
            QuadProgram(P=np.array([[1.0, 2.0], [0.0, 1.0]]), q=np.zeros(2),
                        A=np.zeros((0, 2)), l=np.zeros(0), u=np.zeros(0))
        with pytest.raises(ValueError, match="l must be <= u"):
            QuadProgram(P=np.eye(2), q=np.zeros(2), A=np.eye(2),
                        l=np.ones(2), u=np.zeros(2))
