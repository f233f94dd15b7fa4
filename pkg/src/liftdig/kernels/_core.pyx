# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels. Semantics mirror `liftdig.kernels._py` exactly; that
module is the reference implementation and the parity tests compare the two.
"""

from libc.math cimport cos, fabs, tanh

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemv, dtrsv

cnp.import_array()

DIVERGENCE_LIMIT = 1.0e6
cdef double _DIV_LIMIT = 1.0e6


cdef inline void _spl(double x0, double dx, const double[:, ::1] coef,
                      double x, double* out) noexcept nogil:
    cdef Py_ssize_t nseg = coef.shape[0]
    cdef double hi = x0 + nseg * dx
    cdef Py_ssize_t i
    cdef double t, a, b, c, d
    if x < x0:
        x = x0
    elif x > hi:
        x = hi
    i = <Py_ssize_t> ((x - x0) / dx)
    if i < 0:
        i = 0
    elif i > nseg - 1:
        i = nseg - 1
    t = x - (x0 + i * dx)
    a = coef[i, 0]
    b = coef[i, 1]
    c = coef[i, 2]
    d = coef[i, 3]
    out[0] = a + t * (b + t * (c + t * d))
    out[1] = b + t * (2.0 * c + 3.0 * d * t)
    out[2] = 2.0 * c + 6.0 * d * t


def spline_eval(double x0, double dx, const double[:, ::1] coef, double x):
    cdef double out[3]
    _spl(x0, dx, coef, x, out)
    return out[0], out[1], out[2]


def sim_substeps(const double[::1] state, const double[::1] u, Py_ssize_t nsub,
                 double h, const double[::1] pv, double sx0, double sdx,
                 const double[:, ::1] coef):
    cdef double x = state[0], z = state[1], phi = state[2]
    cdef double px = state[3], pz = state[4], pphi = state[5]
    cdef double ms = state[6], isl = state[7]
    cdef double ux = u[0], uz = u[1], uphi = u[2]
    cdef double mb = pv[0], ib = pv[1], rho = pv[2], w = pv[3], g = pv[4]
    cdef double c1 = pv[5], c2 = pv[6], c3 = pv[7], c4 = pv[8], c5 = pv[9]
    cdef double c6 = pv[10], c7 = pv[11]
    cdef double vref = pv[12], wref = pv[13], rg = pv[14]
    cdef double mcap = pv[15], phif = pv[16]
    cdef double sv[3]
    cdef double d, m, inertia, vx, vz, om, etx, etz, etphi, mdot, dm, cterm, vterm
    cdef bint diverged = False
    cdef Py_ssize_t k

    with nogil:
        for k in range(nsub):
            _spl(sx0, sdx, coef, x, sv)
            d = sv[0] - z
            if d < 0.0:
                d = 0.0
            m = mb + ms
            inertia = ib + isl
            vx = px / m
            vz = pz / m
            om = pphi / inertia

            etx = (c1 * d * d + c2 * d) * tanh(vx / vref) + c3 * d * vx
            etz = (c4 * d * d + c5 * d) * tanh(vz / vref) + m * g
            etphi = c6 * d * etx + c7 * d * d * tanh(om / wref)

            if ms >= mcap:
                mdot = 0.0
            else:
                cterm = cos(phi - phif)
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

            if (fabs(x) > _DIV_LIMIT or fabs(z) > _DIV_LIMIT
                    or fabs(phi) > _DIV_LIMIT or fabs(px) > _DIV_LIMIT
                    or fabs(pz) > _DIV_LIMIT or fabs(pphi) > _DIV_LIMIT):
                diverged = True
                break

    out = np.array([x, z, phi, px, pz, pphi, ms, isl])
    return out, bool(diverged)


def lifted_rollout(const double[:, ::1] A, const double[:, ::1] B,
                   const double[:, ::1] Bs, const double[::1] xi0,
                   const double[:, ::1] U, double sx0, double sdx,
                   const double[:, ::1] coef, double xlo, double xhi):
    cdef Py_ssize_t n = xi0.shape[0]
    cdef Py_ssize_t nu = B.shape[1]
    cdef Py_ssize_t nsteps = U.shape[0]
    traj_arr = np.zeros((nsteps + 1, n))
    cdef double[:, ::1] traj = traj_arr
    cdef double sv[3]
    cdef double acc, xk
    cdef Py_ssize_t k, i, j, done = nsteps

    for i in range(n):
        traj[0, i] = xi0[i]

    with nogil:
        for k in range(nsteps):
            xk = traj[k, 0]
            if xk < xlo or xk > xhi:
                done = k
                break
            _spl(sx0, sdx, coef, xk, sv)
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += A[i, j] * traj[k, j]
                for j in range(nu):
                    acc += B[i, j] * U[k, j]
                acc += Bs[i, 0] * sv[0] + Bs[i, 1] * sv[1]
                traj[k + 1, i] = acc

    return traj_arr, done


def admm_run(const double[:, ::1] L, const double[:, ::1] P,
             const double[::1] q, const double[:, ::1] A,
             const double[::1] l, const double[::1] u,
             const double[::1] rho, double sigma, double alpha,
             double[::1] x, double[::1] z, double[::1] y,
             const double[::1] dinv, const double[::1] einv,
             Py_ssize_t max_iter, double eps_abs, double eps_rel,
             Py_ssize_t check_every):
    cdef int n = <int> x.shape[0]
    cdef int m = <int> z.shape[0]
    cdef int inc = 1
    cdef double one = 1.0, zero = 0.0
    cdef Py_ssize_t it = 0, steps, s, i
    cdef double pri, dua, v, znew
    cdef double ax_mag, z_mag, px_mag, aty_mag, q_mag, pri_lim, dua_lim
    cdef bint converged = False

    rhs_arr = np.zeros(n)
    rhs2_arr = np.zeros(n)
    tmpm_arr = np.zeros(m)
    cdef double[::1] rhs = rhs_arr
    cdef double[::1] rhs2 = rhs2_arr
    cdef double[::1] tmpm = tmpm_arr

    # C-contiguous (m, n) array seen column-major is the (n, m) transpose:
    # trans='T' applies A, trans='N' applies A'.
    cdef double* Ap = NULL
    cdef double* Pp = <double*> &P[0, 0]
    cdef double* Lp = <double*> &L[0, 0]
    if m > 0:
        Ap = <double*> &A[0, 0]

    pri = np.inf
    dua = np.inf
    while it < max_iter:
        steps = check_every if (max_iter - it) > check_every else (max_iter - it)
        with nogil:
            for s in range(steps):
                # rhs = sigma*x - q + A' (rho*z - y)
                for i in range(m):
                    tmpm[i] = rho[i] * z[i] - y[i]
                for i in range(n):
                    rhs[i] = sigma * x[i] - q[i]
                if m > 0:
                    dgemv(b"N", &n, &m, &one, Ap, &n, &tmpm[0], &inc, &one, &rhs[0], &inc)
                # rhs <- K^-1 rhs via the Cholesky factor
                dtrsv(b"U", b"T", b"N", &n, Lp, &n, &rhs[0], &inc)
                dtrsv(b"U", b"N", b"N", &n, Lp, &n, &rhs[0], &inc)
                # tmpm = A @ x_tilde ; x = alpha*x_tilde + (1-alpha)*x
                if m > 0:
                    dgemv(b"T", &n, &m, &one, Ap, &n, &rhs[0], &inc, &zero, &tmpm[0], &inc)
                for i in range(n):
                    x[i] = alpha * rhs[i] + (1.0 - alpha) * x[i]
                for i in range(m):
                    v = alpha * tmpm[i] + (1.0 - alpha) * z[i]
                    znew = v + y[i] / rho[i]
                    if znew < l[i]:
                        znew = l[i]
                    elif znew > u[i]:
                        znew = u[i]
                    y[i] += rho[i] * (v - znew)
                    z[i] = znew
        it += steps

        # Unscaled residuals (check interval): pri = |einv*(Ax - z)|_inf,
        # dua = |dinv*(Px + q + A'y)|_inf, with relative-tolerance terms
        # from the magnitudes of the participating vectors.
        pri = 0.0
        dua = 0.0
        ax_mag = 0.0
        z_mag = 0.0
        px_mag = 0.0
        aty_mag = 0.0
        q_mag = 0.0
        with nogil:
            if m > 0:
                dgemv(b"T", &n, &m, &one, Ap, &n, &x[0], &inc, &zero, &tmpm[0], &inc)
            for i in range(m):
                v = fabs(einv[i] * (tmpm[i] - z[i]))
                if v > pri:
                    pri = v
                v = fabs(einv[i] * tmpm[i])
                if v > ax_mag:
                    ax_mag = v
                v = fabs(einv[i] * z[i])
                if v > z_mag:
                    z_mag = v
            # dual residual accumulated in rhs; track term magnitudes
            for i in range(n):
                rhs[i] = 0.0
            dgemv(b"T", &n, &n, &one, Pp, &n, &x[0], &inc, &zero, &rhs[0], &inc)
            for i in range(n):
                v = fabs(dinv[i] * rhs[i])
                if v > px_mag:
                    px_mag = v
                v = fabs(dinv[i] * q[i])
                if v > q_mag:
                    q_mag = v
                rhs[i] += q[i]
            if m > 0:
                dgemv(b"N", &n, &m, &one, Ap, &n, &y[0], &inc, &zero, &rhs2[0], &inc)
                for i in range(n):
                    v = fabs(dinv[i] * rhs2[i])
                    if v > aty_mag:
                        aty_mag = v
                    rhs[i] += rhs2[i]
            for i in range(n):
                v = fabs(dinv[i] * rhs[i])
                if v > dua:
                    dua = v
        pri_lim = eps_abs + eps_rel * (ax_mag if ax_mag > z_mag else z_mag)
        dua_lim = eps_abs + eps_rel * max(px_mag, max(aty_mag, q_mag))
        if pri <= pri_lim and dua <= dua_lim:
            converged = True
            break

    return int(it), float(pri), float(dua), bool(converged)
