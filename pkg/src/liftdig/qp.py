"""Convex QP solver: operator splitting (ADMM) with box/linear constraints.

Solves  minimize 0.5 z'Pz + q'z  subject to  l <= Az <= u  (equalities
encoded as l = u). Dense, deterministic, warm-startable; the iteration
loop runs in the kernel backend. Problems are Ruiz-equilibrated, the
splitting penalty is fixed (boosted on equality rows), and an optional
active-set polish snaps converged solutions to high-accuracy KKT points.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky

from . import kernels

INF = 1e30


@dataclass(frozen=True)
class QuadProgram:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        q = np.asarray(self.q, dtype=float)
        A = np.asarray(self.A, dtype=float)
        l = np.asarray(self.l, dtype=float)
        u = np.asarray(self.u, dtype=float)
        n = q.shape[0]
        if P.shape != (n, n):
            raise ValueError("P must be n x n")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-9 * max(np.max(np.abs(P), initial=0.0), 1.0):
            raise ValueError("P must be symmetric")
        m = A.shape[0] if A.size else 0
        if A.size and A.shape != (m, n):
            raise ValueError("A must be m x n")
        if l.shape != (m,) or u.shape != (m,):
            raise ValueError("l, u must match the constraint rows")
        if np.any(l > u):
            raise ValueError("l must be <= u elementwise")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "A", A.reshape(m, n))
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "u", u)

    @property
    def n(self):
        return self.q.shape[0]

    @property
    def m(self):
        return self.A.shape[0]

    def objective(self, z):
        return float(0.5 * z @ self.P @ z + self.q @ z)


@dataclass
class QpSolution:
    z: np.ndarray                # primal
    y: np.ndarray                # dual
    status: str                  # solved | max_iter | infeasible
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float = float("nan")
    residual_history: list = None  # (iteration, primal, dual) per check chunk


@dataclass(frozen=True)
class SolverSettings:
    """Operator-splitting parameters; defaults follow the standard recipe.

    The penalty starts at `rho` (boosted on equality rows) and adapts to
    the primal/dual residual balance between check chunks; each update
    refactorizes the reduced KKT matrix.
    """

    rho: float = 0.1
    rho_eq_scale: float = 1.0e3   # penalty boost on equality rows
    sigma: float = 1.0e-6
    alpha: float = 1.6
    check_every: int = 25
    ruiz_iters: int = 10
    adaptive_rho: bool = True
    rho_update_factor: float = 5.0  # adapt only beyond this imbalance
    rho_max_updates: int = 2        # dense refactors are expensive
    eps_rel: float = 0.0          # relative tolerance term; 0 = absolute only
    polish: bool = True
    polish_reg: float = 1.0e-9
    infeas_tol: float = 1.0e-10


@dataclass
class Scaling:
    """Diagonal equilibration D (variables), E (constraints)."""

    d: np.ndarray
    e: np.ndarray


def ruiz_equilibrate(P, A, iters):
    """Symmetric diagonal scaling of the KKT block matrix [[P, A'], [A, 0]].

    Returns a Scaling whose diagonals bring all column infinity-norms of
    the scaled KKT matrix toward 1.
    """
    n = P.shape[0]
    m = A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    Ps = P.copy()
    As = A.copy()
    for _ in range(iters):
        cn = np.maximum(_col_inf_norm(Ps), _col_inf_norm(As))
        cm = _row_inf_norm(As)
        dd = 1.0 / np.sqrt(np.clip(cn, 1e-12, 1e12))
        de = 1.0 / np.sqrt(np.clip(cm, 1e-12, 1e12))
        Ps = Ps * dd[:, None] * dd[None, :]
        if m:
            As = As * de[:, None] * dd[None, :]
        d *= dd
        e *= de
    return Scaling(d=d, e=e)


def solve(prob, warm=None, tol=1e-6, max_iter=4000, settings=None, scaling=None):
    """Solve the QP to absolute KKT tolerance `tol`.

    warm: optional (z, y) pair (or a previous QpSolution) in original
    units. `scaling` can carry the equilibration of a structurally
    identical previous problem to skip the Ruiz sweeps.
    """
    st = settings or SolverSettings()
    n, m = prob.n, prob.m

    if m == 0:
        return _solve_unconstrained(prob, tol)

    if scaling is not None and (scaling.d.size != n or scaling.e.size != m):
        scaling = None
    if scaling is None:
        scaling = ruiz_equilibrate(prob.P, prob.A, st.ruiz_iters)
    d, e = scaling.d, scaling.e

    Ps = prob.P * d[:, None] * d[None, :]
    qs = prob.q * d
    # Cost normalization: bring the scaled cost to unit magnitude so the
    # primal/dual residual balance (and hence rho) is meaningful.
    c = 1.0 / max(float(np.mean(_col_inf_norm(Ps))) if Ps.size else 0.0,
                  _inf(qs), 1e-8)
    Ps = c * Ps
    qs = c * qs
    As = prob.A * e[:, None] * d[None, :]
    with np.errstate(invalid="ignore"):
        ls = np.where(np.isfinite(prob.l), prob.l * e, prob.l)
        us = np.where(np.isfinite(prob.u), prob.u * e, prob.u)
    ls = np.maximum(ls, -INF)
    us = np.minimum(us, INF)

    eq = (us - ls) < 1e-12
    rho = np.full(m, st.rho)
    rho[eq] *= st.rho_eq_scale

    Ps = np.ascontiguousarray(Ps)
    As = np.ascontiguousarray(As)
    sigma_eye = st.sigma * np.eye(n)

    # Constraint rows with at most two nonzeros (box and slack-coupled
    # rows) contribute O(1) entries to A' diag(rho) A; only the dense rows
    # need the matrix product.
    nnz_row = np.count_nonzero(As, axis=1)
    sparse_rows = np.flatnonzero(nnz_row <= 2)
    dense_rows = np.flatnonzero(nnz_row > 2)
    sp_cols = []
    sp_vals = []
    for r in sparse_rows:
        cols = np.flatnonzero(As[r])
        sp_cols.append(cols)
        sp_vals.append(As[r, cols])
    Ad = np.ascontiguousarray(As[dense_rows])

    def _factor(rho_vec):
        if dense_rows.size:
            K = Ps + sigma_eye + (Ad.T * rho_vec[dense_rows]) @ Ad
        else:
            K = Ps + sigma_eye
        for r, cols, vals in zip(sparse_rows, sp_cols, sp_vals):
            rv = rho_vec[r]
            for a in range(cols.size):
                for b in range(cols.size):
                    K[cols[a], cols[b]] += rv * vals[a] * vals[b]
        return np.ascontiguousarray(cholesky(K, lower=True))

    L = _factor(rho)

    wz = wy = None
    if warm is not None:
        wz, wy = (warm.z, warm.y) if isinstance(warm, QpSolution) else warm
        if np.size(wz) != n or np.size(wy) != m:
            wz = wy = None
    if wz is not None:
        x = np.asarray(wz, dtype=float) / d
        y = c * np.asarray(wy, dtype=float) / e
        zaux = np.clip(As @ x, ls, us)
    else:
        x = np.zeros(n)
        y = np.zeros(m)
        zaux = np.zeros(m)

    # Scaled residuals are c*D*(dual) and E*(primal); divide them back out.
    dinv = 1.0 / (c * d)
    einv = 1.0 / e

    status = "max_iter"
    total_iter = 0
    pri = dua = np.inf
    history = []
    rho_updates = 0
    chunk = max(st.check_every * 4, st.check_every)
    while total_iter < max_iter:
        y_before = y.copy()
        budget = min(chunk, max_iter - total_iter)
        it, pri, dua, converged = kernels.admm_run(
            L, Ps, qs, As, ls, us, rho, st.sigma, st.alpha, x, zaux, y,
            dinv, einv, budget, tol, st.eps_rel, st.check_every)
        total_iter += it
        history.append((total_iter, float(pri), float(dua)))
        if converged:
            status = "solved"
            break
        dy = (y - y_before) * e / c
        if _primal_infeasible(prob, dy, st.infeas_tol):
            status = "infeasible"
            break
        if st.adaptive_rho and rho_updates < st.rho_max_updates:
            scale = _rho_rescale(Ps, qs, As, x, zaux, y)
            if scale > st.rho_update_factor or scale < 1.0 / st.rho_update_factor:
                scale = float(np.clip(scale, 1e-4, 1e4))
                rho = np.clip(rho * scale, 1e-6, 1e6)
                L = _factor(rho)
                rho_updates += 1

    z = x * d
    yout = y * e / c

    if status != "infeasible" and st.polish:
        z, yout = _polish(prob, z, yout, st)
        pri, dua, _ = kkt_residuals(prob, QpSolution(z, yout, status, total_iter, 0, 0))
        if status == "max_iter" and pri <= tol and dua <= tol:
            status = "solved"

    return QpSolution(z=z, y=yout, status=status, iterations=total_iter,
                      primal_residual=pri, dual_residual=dua,
                      objective=prob.objective(z), residual_history=history)


def kkt_residuals(prob, sol):
    """(primal, dual, complementarity) infinity-norm residuals.

    primal: distance of Az from [l, u]; dual: stationarity of the
    Lagrangian; complementarity: multiplier magnitude times distance to
    its active bound (positive multipliers pair with the upper bound).
    """
    z, y = sol.z, sol.y
    if prob.m == 0:
        dual = _inf(prob.P @ z + prob.q)
        return 0.0, dual, 0.0
    Az = prob.A @ z
    primal = _inf(Az - np.clip(Az, prob.l, prob.u))
    dual = _inf(prob.P @ z + prob.q + prob.A.T @ y)
    up = np.maximum(y, 0.0)
    lo = np.maximum(-y, 0.0)
    with np.errstate(invalid="ignore"):
        gap_u = np.where(up > 0, np.abs(prob.u - Az), 0.0)
        gap_l = np.where(lo > 0, np.abs(Az - prob.l), 0.0)
    comp = _inf(up * gap_u + lo * gap_l)
    return float(primal), float(dual), float(comp)


def dump_problem(prob, path):
    """Debug dump for reproducing a problematic QP."""
    doc = {"P": prob.P.tolist(), "q": prob.q.tolist(), "A": prob.A.tolist(),
           "l": _encode_inf(prob.l), "u": _encode_inf(prob.u)}
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_problem(path):
    with open(path) as fh:
        doc = json.load(fh)
    return QuadProgram(P=np.array(doc["P"], dtype=float),
                       q=np.array(doc["q"], dtype=float),
                       A=np.array(doc["A"], dtype=float),
                       l=_decode_inf(doc["l"]), u=_decode_inf(doc["u"]))


def _solve_unconstrained(prob, tol):
    z, *_ = np.linalg.lstsq(prob.P, -prob.q, rcond=None)
    dual = _inf(prob.P @ z + prob.q)
    status = "solved" if dual <= tol else "max_iter"
    return QpSolution(z=z, y=np.zeros(0), status=status, iterations=0,
                      primal_residual=0.0, dual_residual=dual,
                      objective=prob.objective(z))


def _rho_rescale(Ps, qs, As, x, zaux, y):
    """sqrt of relative primal/dual residual ratio on the scaled data."""
    Ax = As @ x
    Px = Ps @ x
    Aty = As.T @ y
    pri = _inf(Ax - zaux) / max(_inf(Ax), _inf(zaux), 1e-10)
    dua = _inf(Px + qs + Aty) / max(_inf(Px), _inf(Aty), _inf(qs), 1e-10)
    if dua <= 1e-16:
        return 1.0
    return float(np.sqrt(pri / dua))


def _primal_infeasible(prob, dy, tol):
    nrm = _inf(dy)
    if nrm <= max(tol, 1e-14):
        return False
    dyn = dy / nrm
    if _inf(prob.A.T @ dyn) > 1e-6:
        return False
    up = np.maximum(dyn, 0.0)
    lo = np.minimum(dyn, 0.0)
    with np.errstate(invalid="ignore"):
        support = (np.where(up > 0, prob.u * up, 0.0)
                   + np.where(lo < 0, prob.l * lo, 0.0))
    if np.any(np.isnan(support)) or np.any(np.isinf(support)):
        return False
    return float(np.sum(support)) < -1e-8


def _polish(prob, z, y, st):
    """Equality-solve on the guessed active set, with refinement.

    Keeps the ADMM iterate unless the polished point strictly improves the
    worst KKT residual.
    """
    Az = prob.A @ z
    act_l = (y < -1e-10) | (Az - prob.l < 1e-8)
    act_u = (y > 1e-10) | (prob.u - Az < 1e-8)
    act_l &= np.isfinite(prob.l)
    act_u &= np.isfinite(prob.u) & ~act_l
    act = act_l | act_u
    ka = int(np.sum(act))
    n = prob.n
    Ared = prob.A[act]
    bred = np.where(act_l[act], prob.l[act], prob.u[act])

    K = np.zeros((n + ka, n + ka))
    K[:n, :n] = prob.P + st.polish_reg * np.eye(n)
    K[:n, n:] = Ared.T
    K[n:, :n] = Ared
    K[n:, n:] = -st.polish_reg * np.eye(ka)
    rhs = np.concatenate([-prob.q, bred])
    try:
        sol = np.linalg.solve(K, rhs)
        # Two iterative-refinement passes against the unregularized KKT.
        K0 = K.copy()
        K0[:n, :n] -= st.polish_reg * np.eye(n)
        K0[n:, n:] += st.polish_reg * np.eye(ka)
        for _ in range(2):
            sol += np.linalg.solve(K, rhs - K0 @ sol)
    except np.linalg.LinAlgError:
        return z, y
    z_new = sol[:n]
    y_new = np.zeros(prob.m)
    y_new[act] = sol[n:]

    old = max(kkt_residuals(prob, QpSolution(z, y, "", 0, 0, 0))[:2])
    new = max(kkt_residuals(prob, QpSolution(z_new, y_new, "", 0, 0, 0))[:2])
    if np.all(np.isfinite(z_new)) and new < old:
        return z_new, y_new
    return z, y


def _col_inf_norm(M):
    return np.max(np.abs(M), axis=0) if M.size else np.zeros(M.shape[1])


def _row_inf_norm(M):
    return np.max(np.abs(M), axis=1) if M.size else np.zeros(M.shape[0])


def _inf(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _encode_inf(v):
    return [float(x) if np.isfinite(x) else ("inf" if x > 0 else "-inf") for x in v]


def _decode_inf(vals):
    return np.array([float(v) for v in vals], dtype=float)
