"""Pure numpy implementations of the hot numerical kernels.

These are the reference semantics; the compiled extension `_core` mirrors
them exactly. Every function here works on plain float64 arrays so the two
backends are interchangeable (see `liftdig.kernels`).
"""

import math

import numpy as np
from scipy.linalg import solve_triangular

# Packing order of the simulator parameter vector consumed by sim_substeps.
SIM_PARAM_NAMES = (
    "m_bucket", "i_bucket", "rho_soil", "width", "gravity",
    "c1", "c2", "c3", "c4", "c5", "c6", "c7",
    "v_ref", "omega_ref", "r_gyr", "m_cap", "phi_fill",
)

DIVERGENCE_LIMIT = 1.0e6


def spline_eval(x0, dx, coef, x):
    """Evaluate a uniform-grid piecewise cubic at x.

    coef has shape (nseg, 4) holding (a, b, c, d) per interval with
    s(x) = a + b*t + c*t^2 + d*t^3, t = x - knot[i]. Queries outside the
    knot range are clamped to the domain edge.

    Returns (value, first derivative, second derivative).
    """
    nseg = coef.shape[0]
    hi = x0 + nseg * dx
    if x < x0:
        x = x0
    elif x > hi:
        x = hi
    i = int((x - x0) / dx)
    if i < 0:
        i = 0
    elif i > nseg - 1:
        i = nseg - 1
    t = x - (x0 + i * dx)
    a, b, c, d = coef[i]
    s = a + t * (b + t * (c + t * d))
    s1 = b + t * (2.0 * c + 3.0 * d * t)
    s2 = 2.0 * c + 6.0 * d * t
    return s, s1, s2


def sim_substeps(state, u, nsub, h, pv, x0, dx, coef):
    """Advance the nonlinear bucket-soil truth dynamics by nsub substeps.

    state: float64[8] = (x, z, phi, px, pz, pphi, m_soil, i_soil)
    u:     float64[3] = (ux, uz, uphi), held constant over the substeps
    h:     substep length in seconds
    pv:    parameter vector packed in SIM_PARAM_NAMES order
    Soil reactions are evaluated at the pre-step state (explicit forces);
    velocities and positions update semi-implicitly.

    Returns (new_state, diverged).
    """
    x, z, phi, px, pz, pphi, ms, isl = (float(v) for v in state)
    ux, uz, uphi = (float(v) for v in u)
    (mb, ib, rho, w, g,
     c1, c2, c3, c4, c5, c6, c7,
     vref, wref, rg, mcap, phif) = (float(v) for v in pv)

    for _ in range(nsub):
        s, _, _ = spline_eval(x0, dx, coef, x)
        d = s - z
        if d < 0.0:
            d = 0.0
        m = mb + ms
        inertia = ib + isl
        vx = px / m
        vz = pz / m
        om = pphi / inertia

        etx = (c1 * d * d + c2 * d) * math.tanh(vx / vref) + c3 * d * vx
        etz = (c4 * d * d + c5 * d) * math.tanh(vz / vref) + m * g
        etphi = c6 * d * etx + c7 * d * d * math.tanh(om / wref)

        if ms >= mcap:
            mdot = 0.0
        else:
            cterm = math.cos(phi - phif)
            if cterm < 0.0:
                cterm = 0.0
            vterm = vx if vx > 0.0 else 0.0
            mdot = rho * w * d * vterm * cterm

        px += h * (ux - etx)
        pz += h * (uz - etz)
        pphi += h * (uphi - etphi)

        dm = mdot * h
        if ms + dm > mcap:
            dm = mcap - ms
        ms += dm
        isl += dm * rg * rg

        m = mb + ms
        inertia = ib + isl
        vx = px / m
        vz = pz / m
        om = pphi / inertia
        x += h * vx
        z += h * vz
        phi += h * om

        if (abs(x) > DIVERGENCE_LIMIT or abs(z) > DIVERGENCE_LIMIT
                or abs(phi) > DIVERGENCE_LIMIT or abs(px) > DIVERGENCE_LIMIT
                or abs(pz) > DIVERGENCE_LIMIT or abs(pphi) > DIVERGENCE_LIMIT):
            return np.array([x, z, phi, px, pz, pphi, ms, isl]), True

    return np.array([x, z, phi, px, pz, pphi, ms, isl]), False


def lifted_rollout(A, B, Bs, xi0, U, x0, dx, coef, xlo, xhi):
    """Open-loop prediction of the lifted linear model.

    Soil inputs (height, slope) are looked up at the *predicted* horizontal
    position, entry 0 of the lifted vector. Stops early when the predicted
    position leaves [xlo, xhi].

    Returns (traj, steps_done): traj has shape (len(U)+1, n) with rows
    0..steps_done valid.
    """
    n = xi0.shape[0]
    nsteps = U.shape[0]
    traj = np.zeros((nsteps + 1, n))
    traj[0] = xi0
    svec = np.empty(2)
    for k in range(nsteps):
        xk = traj[k, 0]
        if xk < xlo or xk > xhi:
            return traj, k
        s, s1, _ = spline_eval(x0, dx, coef, xk)
        svec[0] = s
        svec[1] = s1
        traj[k + 1] = A @ traj[k] + B @ U[k] + Bs @ svec
    return traj, nsteps


def admm_run(L, P, q, A, l, u, rho, sigma, alpha, x, z, y,
             dinv, einv, max_iter, eps_abs, eps_rel, check_every):
    """Operator-splitting iterations for the box-constrained QP.

    Minimizes 0.5 x'Px + q'x subject to l <= Ax <= u on (already scaled)
    data. L is the lower Cholesky factor of P + sigma*I + A' diag(rho) A.
    x, z, y are updated in place. dinv and einv unscale the residuals so
    convergence is declared on the original problem data, with tolerance
    eps_abs plus eps_rel times the magnitude of the participating terms.

    Returns (iterations_run, primal_residual, dual_residual, converged).
    """
    rho_inv = 1.0 / rho
    pri = np.inf
    dua = np.inf
    it = 0
    while it < max_iter:
        steps = min(check_every, max_iter - it)
        for _ in range(steps):
            rhs = sigma * x - q + A.T @ (rho * z - y)
            xt = solve_triangular(L, rhs, lower=True)
            xt = solve_triangular(L.T, xt, lower=False)
            zt = A @ xt
            x[:] = alpha * xt + (1.0 - alpha) * x
            zbar = alpha * zt + (1.0 - alpha) * z
            znew = np.clip(zbar + rho_inv * y, l, u)
            y += rho * (zbar - znew)
            z[:] = znew
        it += steps
        Ax = A @ x
        Px = P @ x
        Aty = A.T @ y
        pri = _inf_norm(einv * (Ax - z))
        dua = _inf_norm(dinv * (Px + q + Aty))
        pri_lim = eps_abs + eps_rel * max(_inf_norm(einv * Ax), _inf_norm(einv * z))
        dua_lim = eps_abs + eps_rel * max(_inf_norm(dinv * Px),
                                          _inf_norm(dinv * Aty),
                                          _inf_norm(dinv * q))
        if pri <= pri_lim and dua <= dua_lim:
            return it, pri, dua, True
    return it, pri, dua, False


def _inf_norm(v):
    return float(np.max(np.abs(v))) if v.size else 0.0
