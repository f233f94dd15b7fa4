"""Model predictive contouring control on the lifted linear model.

The controller tracks a geometric path parametrized by arc length
theta in [theta_s, 0] (theta_s = -path length, so theta increases toward
zero as the bucket progresses). Position error splits into a contouring
component normal to the path and a lag component along it; both are
linearized about the previously optimized trajectory, as is the soil
profile, and the resulting problem is a convex QP solved receding-horizon
at the sampling rate.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import qp
from .model import (DiscreteLiftedModel, IX_VX, IX_Z, NU, StateBounds, lift)
from .terrain import natural_cubic_coefficients, SurfaceSpline
from .qp import QuadProgram, SolverSettings


@dataclass(frozen=True)
class ContourPath:
    """Arc-length parametrized planar path.

    x_of/z_of are natural cubic splines in theta on a uniform grid over
    [theta_s, 0]; their derivative at any theta is the unit tangent up to
    resampling error.
    """

    theta_s: float
    x_of: SurfaceSpline
    z_of: SurfaceSpline

    @property
    def length(self):
        return -self.theta_s

    def eval(self, theta):
        """(x_d, z_d, tan_x, tan_z, tangent-angle rate) at theta (clamped)."""
        xd = self.x_of.eval(theta)
        zd = self.z_of.eval(theta)
        dx, dz = xd.slope, zd.slope
        sp2 = dx * dx + dz * dz
        if sp2 > 0.0:
            nrm = np.sqrt(sp2)
            tx, tz = dx / nrm, dz / nrm
            curv = (dx * zd.curvature - dz * xd.curvature) / sp2
        else:
            tx, tz, curv = 1.0, 0.0, 0.0
        return xd.height, zd.height, tx, tz, curv

    def tangent_angle(self, theta):
        _, _, tx, tz, _ = self.eval(theta)
        return float(np.arctan2(tz, tx))

    def point(self, theta):
        x, z, *_ = self.eval(theta)
        return np.array([x, z])

    def sample(self, n=400):
        thetas = np.linspace(self.theta_s, 0.0, n)
        pts = np.array([self.point(t) for t in thetas])
        return thetas, pts


def path_from_waypoints(points, samples_per_meter=100, quad_tol=1e-4):
    """Build an arc-length path through waypoints.

    The waypoints are first splined against chord length, the cumulative
    arc length is computed by quadrature to relative tolerance quad_tol,
    and the curve is resampled uniformly in arc length before the final
    spline fit, which restores the (near) unit-speed parametrization.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (x, z) waypoints")
    seglen = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(seglen < 1e-12):
        raise ValueError("duplicate consecutive waypoints")

    # Chord-length parametrization; densify with extra knots when only two
    # waypoints are given so the spline fit has enough support.
    t = np.concatenate([[0.0], np.cumsum(seglen)])
    if pts.shape[0] < 4:
        tf = np.linspace(0.0, t[-1], 7)
        xf = np.interp(tf, t, pts[:, 0])
        zf = np.interp(tf, t, pts[:, 1])
        t, pts = tf, np.column_stack([xf, zf])
    cx = natural_cubic_coefficients(t, pts[:, 0])
    cz = natural_cubic_coefficients(t, pts[:, 1])

    def speed(tv):
        tv = np.clip(tv, t[0], t[-1])
        idx = np.clip(np.searchsorted(t, tv, side="right") - 1, 0, len(t) - 2)
        tau = tv - t[idx]
        dx = cx[idx, 1] + tau * (2.0 * cx[idx, 2] + 3.0 * cx[idx, 3] * tau)
        dz = cz[idx, 1] + tau * (2.0 * cz[idx, 2] + 3.0 * cz[idx, 3] * tau)
        return np.hypot(dx, dz)

    # Cumulative arc length on a fine grid (composite Simpson), refined
    # until successive estimates agree to quad_tol relative.
    nfine = 1024
    total_prev = None
    while True:
        tg = np.linspace(t[0], t[-1], 2 * nfine + 1)
        sp = speed(tg)
        h = tg[1] - tg[0]
        seg = h / 3.0 * (sp[:-2:2] + 4.0 * sp[1:-1:2] + sp[2::2])
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = cum[-1]
        if total_prev is not None and abs(total - total_prev) <= quad_tol * max(total, 1e-12):
            break
        if nfine >= 1 << 16:
            break
        total_prev = total
        nfine *= 2
    t_nodes = tg[::2]

    L = float(total)
    n_out = max(int(np.ceil(L * samples_per_meter)) + 1, 25)
    s_grid = np.linspace(0.0, L, n_out)
    t_of_s = np.interp(s_grid, cum, t_nodes)
    # Newton refinement of the inversion using the exact speed.
    for _ in range(3):
        err = np.interp(t_of_s, t_nodes, cum) - s_grid
        t_of_s = np.clip(t_of_s - err / np.maximum(speed(t_of_s), 1e-9), t[0], t[-1])

    xs = _eval_poly(cx, t, t_of_s)
    zs = _eval_poly(cz, t, t_of_s)
    dth = L / (n_out - 1)
    x_spl = SurfaceSpline(x0=-L, dx=dth, coef=natural_cubic_coefficients(s_grid - L, xs))
    z_spl = SurfaceSpline(x0=-L, dx=dth, coef=natural_cubic_coefficients(s_grid - L, zs))
    return ContourPath(theta_s=-L, x_of=x_spl, z_of=z_spl)


def contouring_errors(xi, theta, path):
    """Contouring (normal) and lag (tangential) error at path parameter theta.

    xi can be any vector whose first two entries are the tip position.
    """
    x, z = float(xi[0]), float(xi[1])
    xd, zd, tx, tz, _ = path.eval(theta)
    ex, ez = x - xd, z - zd
    eps_c = tz * ex - tx * ez
    eps_l = -tx * ex - tz * ez
    return float(eps_c), float(eps_l)


@dataclass(frozen=True)
class ErrorLinearization:
    """First-order model of (eps_c, eps_l) around a reference trajectory.

    For step i: eps ~= const[i] + grad_xz[i] @ (x, z) + grad_theta[i] * theta.
    """

    const: np.ndarray       # (N, 2)
    grad_xz: np.ndarray     # (N, 2, 2)
    grad_theta: np.ndarray  # (N, 2)


def linearize_errors(ref, path):
    """Analytic Taylor expansion of the contouring/lag errors.

    The theta derivative uses the tangent-angle rate (curvature); because
    the parametrization is unit speed, the direct terms through x_d, z_d
    collapse to (0, +1) for (eps_c, eps_l).
    """
    N = ref.Theta.shape[0]
    const = np.zeros((N, 2))
    grad_xz = np.zeros((N, 2, 2))
    grad_theta = np.zeros((N, 2))
    for i in range(N):
        th = ref.Theta[i]
        x, z = ref.Xi[i, 0], ref.Xi[i, 1]
        xd, zd, tx, tz, curv = path.eval(th)
        ex, ez = x - xd, z - zd
        eps_c = tz * ex - tx * ez
        eps_l = -tx * ex - tz * ez
        g_c = np.array([tz, -tx])
        g_l = np.array([-tx, -tz])
        dc_dth = curv * (tx * ex + tz * ez)          # = -curv * eps_l
        dl_dth = curv * (tz * ex - tx * ez) + 1.0    # = +curv * eps_c + 1
        grad_xz[i, 0] = g_c
        grad_xz[i, 1] = g_l
        grad_theta[i] = (dc_dth, dl_dth)
        const[i, 0] = eps_c - g_c @ (x, z) - dc_dth * th
        const[i, 1] = eps_l - g_l @ (x, z) - dl_dth * th
    return ErrorLinearization(const=const, grad_xz=grad_xz, grad_theta=grad_theta)


@dataclass(frozen=True)
class SoilLinearization:
    """Per-step affine soil input s(x) ~= const[i] + slope[i] * x."""

    const: np.ndarray   # (N, 2)
    slope: np.ndarray   # (N, 2)
    clamped: bool


def linearize_soil(ref, spline):
    """Affine soil profile around the reference positions.

    The height/slope pair is expanded to first order in x: the value at
    the anchor plus (slope, curvature) times the offset. Anchors outside
    the spline domain evaluate at the clamped edge and set the flag.
    """
    N = ref.Xi.shape[0]
    const = np.zeros((N, 2))
    slope = np.zeros((N, 2))
    clamped = False
    for i in range(N):
        xa = ref.Xi[i, 0]
        soil = spline.eval(xa)
        clamped = clamped or soil.clamped
        v = np.array([soil.height, soil.slope])
        g = np.array([soil.slope, soil.curvature])
        const[i] = v - g * xa
        slope[i] = g
    return SoilLinearization(const=const, slope=slope, clamped=clamped)


@dataclass(frozen=True)
class MpccConfig:
    """Horizon, weights, and constraint configuration of the controller."""

    N: int = 20
    Q: np.ndarray = field(default_factory=lambda: np.diag([500.0, 100.0]))
    q_theta: float = 1.0
    # Input-rate weights are per squared newton (newton-meter): sized so a
    # fast but not violent actuator slew costs about as much as a few
    # centimeters of contouring error.
    R: np.ndarray = field(default_factory=lambda: np.diag([3e-7, 3e-7, 3e-6, 100.0]))
    ups_max: float = 0.05
    u_min: tuple = (-12000.0, -12000.0, -3000.0)
    u_max: tuple = (12000.0, 12000.0, 3000.0)
    force_min: tuple | None = None      # optional (etx, etz, etphi) lower bounds
    force_max: tuple | None = None      # optional upper bounds
    m_soil_max: float | None = None
    vx_min: float = 0.0
    # Planned vertical speed stays in the gently-identified regime; the
    # training percentiles are inflated by soil-entry transients.
    vz_bounds: tuple | None = (-0.25, 0.25)
    # Maximum planned cut depth below the current pass surface. The model
    # is only valid to roughly the excitation's depth window, and depth
    # (not absolute height) is the quantity that transfers across passes.
    depth_max: float | None = 0.30
    soil_constraint: bool = True        # z below surface at the reference x
    # Lifted-state dimensions taking two-sided training-percentile bounds.
    # x is the traversal coordinate (a box would stop path progress); z gets
    # only the percentile floor plus the surface cap; the monotone fill
    # states get physical bounds [0, inf) / [0, m_soil_max].
    bound_dims: tuple = ("phi", "px", "pz", "pphi", "vx", "vz", "omega",
                         "etx", "etz", "etphi")
    # State boxes are softened by a shared slack (inputs and the virtual
    # input stay hard); a disturbed measurement outside the box then costs
    # rather than wedges the problem.
    slack_lin: float = 20.0
    slack_quad: float = 200.0
    slack_max: float = 20.0
    qp_tol: float = 1e-4
    qp_max_iter: int = 1200
    init_solves: int = 3        # relinearization passes on the first solve
    n_fail: int = 5
    complete_tol: float = 1e-3
    # Controller solves terminate on absolute + relative residuals (the QP
    # data spans kilonewtons, so a purely absolute test is impractical) and
    # skip the active-set polish, which costs more than it buys at 30 Hz.
    solver: SolverSettings = field(
        default_factory=lambda: SolverSettings(eps_rel=1e-3, polish=False))

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if self.N < 2:
            raise ValueError("horizon must be at least 2 steps")
        if Q.shape != (2, 2) or R.shape != (4, 4):
            raise ValueError("Q must be 2x2 and R 4x4")
        if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) < -1e-12:
            raise ValueError("R must be positive semidefinite")
        if not (self.ups_max > 0.0):
            raise ValueError("ups_max must be positive")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


@dataclass
class ReferenceTrajectory:
    """Shifted previous solution used as the linearization anchor."""

    Xi: np.ndarray      # (N, order)
    Theta: np.ndarray   # (N,)

    def __post_init__(self):
        if self.Xi.shape[0] != self.Theta.shape[0]:
            raise ValueError("reference lengths differ")


@dataclass
class QpIndexMap:
    """Positions of each block in the stacked decision vector.

    Per step i = 1..N the layout is [xi(order), theta, u(3), upsilon]; one
    trailing solver-internal slack variable softens the state boxes.
    """

    order: int
    N: int
    soft_rows_per_step: int = 0   # set by build_qp; used for warm shifting
    hard_rows_per_step: int = 0

    @property
    def block(self):
        return self.order + 1 + NU + 1

    def xi(self, i):
        base = (i - 1) * self.block
        return slice(base, base + self.order)

    def theta(self, i):
        return (i - 1) * self.block + self.order

    def u(self, i):
        base = (i - 1) * self.block + self.order + 1
        return slice(base, base + NU)

    def ups(self, i):
        return (i - 1) * self.block + self.order + 1 + NU

    @property
    def slack(self):
        return self.N * self.block

    @property
    def n_stacked(self):
        """Size of the documented per-step stacking (without the slack)."""
        return self.N * self.block

    @property
    def n_vars(self):
        return self.N * self.block + 1


def build_qp(model, xi_now, theta_now, ref, path, spline, cfg,
             u_prev=None, ups_prev=0.0, soil_active=True):
    """Assemble the horizon QP.

    Decision vector stacks, per step i = 1..N: the predicted lifted state,
    the path parameter, the input applied at step i-1 and the virtual path
    input. Dynamics and the theta recursion are equality rows; inputs,
    virtual input, lifted-state bounds (with the horizontal-velocity floor
    and, when active, the z-below-surface cap at the reference positions)
    and the theta window are box rows. The cost penalizes linearized
    contouring/lag errors, rewards path progression, and penalizes input
    and virtual-input increments (differenced against the previous applied
    values at the first step).

    Returns (QuadProgram, QpIndexMap).
    """
    n = model.order
    N = cfg.N
    if ref.Xi.shape != (N, n):
        raise ValueError(f"reference must be {N}x{n}, got {ref.Xi.shape}")
    if model.bounds is None:
        raise ValueError("model has no training bounds; the controller needs them")
    u_prev = np.zeros(NU) if u_prev is None else np.asarray(u_prev, dtype=float)

    idx = QpIndexMap(order=n, N=N)
    nv = idx.n_vars
    theta_s = path.theta_s

    errlin = linearize_errors(ref, path)
    soillin = linearize_soil(ref, spline)

    # --- cost -----------------------------------------------------------
    P = np.zeros((nv, nv))
    qv = np.zeros(nv)
    Q2 = 2.0 * cfg.Q
    R2 = 2.0 * cfg.R
    for i in range(1, N + 1):
        # (const + E v)' Q (const + E v) over v = (x, z, theta).
        cols = [idx.xi(i).start, idx.xi(i).start + 1, idx.theta(i)]
        E = np.zeros((2, 3))
        E[:, :2] = errlin.grad_xz[i - 1]
        E[:, 2] = errlin.grad_theta[i - 1]
        e0 = errlin.const[i - 1]
        P[np.ix_(cols, cols)] += E.T @ Q2 @ E
        qv[cols] += E.T @ Q2 @ e0
        qv[idx.theta(i)] -= cfg.q_theta

        # Rate penalty on (u, upsilon) increments.
        w_cols = list(range(idx.u(i).start, idx.u(i).stop)) + [idx.ups(i)]
        P[np.ix_(w_cols, w_cols)] += R2
        if i == 1:
            w0 = np.concatenate([u_prev, [ups_prev]])
            qv[w_cols] -= R2 @ w0
        else:
            p_cols = list(range(idx.u(i - 1).start, idx.u(i - 1).stop)) + [idx.ups(i - 1)]
            P[np.ix_(p_cols, p_cols)] += R2
            P[np.ix_(w_cols, p_cols)] -= R2
            P[np.ix_(p_cols, w_cols)] -= R2

    # Soft-constraint slack cost.
    P[idx.slack, idx.slack] += 2.0 * cfg.slack_quad
    qv[idx.slack] += cfg.slack_lin

    # --- equality rows: dynamics and theta recursion ----------------------
    n_eq = N * (n + 1)
    Aeq = np.zeros((n_eq, nv))
    beq = np.zeros(n_eq)
    soil_now = spline.eval(float(xi_now[0]))
    for i in range(1, N + 1):
        r = (i - 1) * (n + 1)
        rows = slice(r, r + n)
        Aeq[rows, idx.xi(i)] = np.eye(n)
        Aeq[rows, idx.u(i)] = -model.B
        if i == 1:
            sv = np.array([soil_now.height, soil_now.slope])
            beq[rows] = model.A @ xi_now + model.Bs @ sv
        else:
            # Soil input of the transition into step i is anchored at the
            # reference position of step i-1 (reference row i-2).
            Aeq[rows, idx.xi(i - 1)] = -model.A
            Aeq[rows, idx.xi(i - 1).start] -= model.Bs @ soillin.slope[i - 2]
            beq[rows] = model.Bs @ soillin.const[i - 2]
        # theta_{i} - theta_{i-1} - ups_i = 0 (theta_0 = theta_now).
        tr = r + n
        Aeq[tr, idx.theta(i)] = 1.0
        Aeq[tr, idx.ups(i)] = -1.0
        if i == 1:
            beq[tr] = theta_now
        else:
            Aeq[tr, idx.theta(i - 1)] = -1.0

    # --- box rows ---------------------------------------------------------
    # Percentile bounds describe the digging regime. Kinematic dimensions
    # (orientation, momenta, velocities) are feasible from spawn and stay
    # bounded throughout; the soil-reaction dimensions and the z floor only
    # apply once the bucket has contacted soil (free flight sits outside
    # the digging-force distribution, like the z-below-surface cap).
    lo_xi = np.full(n, -qp.INF)
    hi_xi = np.full(n, qp.INF)
    name_to_i = {nm: i for i, nm in enumerate(model.names)}
    force_dims = ("etx", "etz", "etphi")
    for nm in cfg.bound_dims:
        i = name_to_i.get(nm)
        if i is None or (nm in force_dims and not soil_active):
            continue
        lo_xi[i] = model.bounds.lower[i]
        hi_xi[i] = model.bounds.upper[i]
    for nm in ("msoil", "isoil"):
        if nm in name_to_i:
            lo_xi[name_to_i[nm]] = 0.0
    lo_xi[IX_VX] = max(lo_xi[IX_VX], cfg.vx_min)
    if cfg.vz_bounds is not None and "vz" in name_to_i:
        j = name_to_i["vz"]
        lo_xi[j] = max(lo_xi[j], cfg.vz_bounds[0])
        hi_xi[j] = min(hi_xi[j], cfg.vz_bounds[1])
    if cfg.force_min is not None:
        lo_xi[9:12] = np.maximum(lo_xi[9:12], cfg.force_min)
    if cfg.force_max is not None:
        hi_xi[9:12] = np.minimum(hi_xi[9:12], cfg.force_max)
    if cfg.m_soil_max is not None:
        hi_xi[12] = min(hi_xi[12], cfg.m_soil_max)
    hi_xi = np.maximum(hi_xi, lo_xi)

    # Soft state-box rows: lo - slack <= xi <= hi + slack. The shared slack
    # keeps the QP feasible when the measured state sits outside the box;
    # its cost keeps it at zero otherwise. Dimensions without a finite
    # bound on a given side contribute no row. The kept pattern is uniform
    # across steps (the z cap is either on for all steps or none).
    z_capped = cfg.soil_constraint and soil_active
    depth_banded = cfg.depth_max is not None and soil_active
    z_arange = np.arange(n) == IX_Z
    up_dims = np.flatnonzero(np.isfinite(hi_xi) | (z_capped & z_arange))
    lo_dims = np.flatnonzero(np.isfinite(lo_xi) | (depth_banded & z_arange))
    soft_per_step = up_dims.size + lo_dims.size
    n_soft = soft_per_step * N
    Asoft = np.zeros((n_soft, nv))
    lsoft = np.full(n_soft, -np.inf)
    usoft = np.full(n_soft, np.inf)
    for i in range(1, N + 1):
        hi_i = hi_xi.copy()
        lo_i = lo_xi.copy()
        if z_capped or depth_banded:
            surf = spline.eval(ref.Xi[i - 1, 0])
            if z_capped:
                hi_i[IX_Z] = min(hi_i[IX_Z], surf.height)
            if depth_banded:
                lo_i[IX_Z] = max(lo_i[IX_Z], surf.height - cfg.depth_max)
            hi_i[IX_Z] = max(hi_i[IX_Z], lo_i[IX_Z])
        r_up = (i - 1) * soft_per_step
        r_lo = r_up + up_dims.size
        base = idx.xi(i).start
        for k, dim in enumerate(up_dims):
            Asoft[r_up + k, base + dim] = 1.0
            Asoft[r_up + k, idx.slack] = -1.0
            usoft[r_up + k] = hi_i[dim]
        for k, dim in enumerate(lo_dims):
            Asoft[r_lo + k, base + dim] = 1.0
            Asoft[r_lo + k, idx.slack] = 1.0
            lsoft[r_lo + k] = lo_i[dim]
    idx.soft_rows_per_step = soft_per_step

    # Hard rows: theta window, inputs, virtual input, the horizontal
    # velocity floor, and the slack's own range.
    n_hard = (1 + NU + 1 + 1) * N + 1
    Ahard = np.zeros((n_hard, nv))
    lhard = np.zeros(n_hard)
    uhard = np.zeros(n_hard)
    r = 0
    for i in range(1, N + 1):
        Ahard[r, idx.theta(i)] = 1.0
        lhard[r] = theta_s
        uhard[r] = 0.0
        r += 1
        Ahard[r:r + NU, idx.u(i)] = np.eye(NU)
        lhard[r:r + NU] = cfg.u_min
        uhard[r:r + NU] = cfg.u_max
        r += NU
        Ahard[r, idx.ups(i)] = 1.0
        lhard[r] = 0.0
        uhard[r] = cfg.ups_max
        r += 1
        Ahard[r, idx.xi(i).start + IX_VX] = 1.0
        lhard[r] = cfg.vx_min
        uhard[r] = np.inf
        r += 1
    Ahard[r, idx.slack] = 1.0
    lhard[r] = 0.0
    uhard[r] = cfg.slack_max
    idx.hard_rows_per_step = 1 + NU + 1 + 1

    A = np.vstack([Aeq, Asoft, Ahard])
    l = np.concatenate([beq, lsoft, lhard])
    u = np.concatenate([beq, usoft, uhard])
    return QuadProgram(P=P, q=qv, A=A, l=l, u=u), idx


@dataclass
class ControlStepResult:
    u: np.ndarray
    upsilon: float
    ref: ReferenceTrajectory
    eps_c: float
    eps_l: float
    theta: float
    qp_status: str
    qp_iterations: int
    fallback: bool = False
    path_complete: bool = False
    aborted: bool = False


class MpccController:
    """Receding-horizon contouring controller.

    Holds the previous optimized trajectory for relinearization and warm
    starting. The z-below-surface constraint stays disabled until first
    soil contact so an approach from above is feasible.

    Internally the lifted state is normalized per dimension (positions
    excepted, so all path geometry keeps physical units): the raw model
    mixes meters with kilonewtons and the stacked QP is numerically
    hopeless otherwise. The change of variables is exact; applied inputs
    are physical.
    """

    def __init__(self, model, path, spline, cfg=None, theta0=None, u_prev=None):
        if model.bounds is None:
            raise ValueError("the controller needs a model with training bounds")
        self.path = path
        self.spline = spline
        self.cfg = cfg or MpccConfig()
        self.theta = path.theta_s if theta0 is None else float(theta0)
        self.u_prev = np.zeros(NU) if u_prev is None else np.asarray(u_prev, dtype=float)
        self.ups_prev = 0.0
        self.ref = None
        self.contacted = False
        self.fail_count = 0
        self._warm = None
        self._scaling = None

        n = model.order
        scale = np.ones(n)
        span = np.maximum(np.abs(model.bounds.lower), np.abs(model.bounds.upper))
        scale[2:] = np.maximum(span[2:], 1e-3)
        sinv = 1.0 / scale
        self.state_scale = scale
        u_scale = np.maximum(np.abs(np.asarray(self.cfg.u_min, dtype=float)),
                             np.abs(np.asarray(self.cfg.u_max, dtype=float)))
        u_scale = np.maximum(u_scale, 1.0)
        self.input_scale = u_scale
        self.model = DiscreteLiftedModel(
            A=sinv[:, None] * model.A * scale[None, :],
            B=sinv[:, None] * model.B * u_scale[None, :],
            Bs=sinv[:, None] * model.Bs,
            dt=model.dt,
            bounds=StateBounds(lower=model.bounds.lower * sinv,
                               upper=model.bounds.upper * sinv),
            names=model.names)
        vx_s = scale[IX_VX]
        Du = np.diag(np.append(u_scale, 1.0))
        self._cfg_internal = replace(
            self.cfg,
            u_min=tuple(np.asarray(self.cfg.u_min) / u_scale),
            u_max=tuple(np.asarray(self.cfg.u_max) / u_scale),
            R=Du @ self.cfg.R @ Du,
            vx_min=self.cfg.vx_min / vx_s,
            vz_bounds=None if self.cfg.vz_bounds is None
            else (self.cfg.vz_bounds[0] / scale[7], self.cfg.vz_bounds[1] / scale[7]),
            force_min=None if self.cfg.force_min is None
            else tuple(np.asarray(self.cfg.force_min) / scale[9:12]),
            force_max=None if self.cfg.force_max is None
            else tuple(np.asarray(self.cfg.force_max) / scale[9:12]),
            m_soil_max=None if self.cfg.m_soil_max is None
            else self.cfg.m_soil_max / scale[12])

    def _init_ref(self, xi_now):
        N = self.cfg.N
        Xi = np.tile(xi_now, (N, 1))
        # Spread theta forward at half the virtual-input limit.
        Theta = np.clip(self.theta + 0.5 * self.cfg.ups_max * np.arange(1, N + 1),
                        self.path.theta_s, 0.0)
        return ReferenceTrajectory(Xi=Xi, Theta=Theta)

    def control_step(self, bucket, aux):
        """Measure, relinearize, solve, apply; returns a ControlStepResult."""
        cfg = self._cfg_internal
        xi_now = lift(bucket, aux) / self.state_scale
        soil_now = self.spline.eval(bucket.x)
        if soil_now.height - bucket.z > 0.0:
            self.contacted = True

        eps_c, eps_l = contouring_errors(xi_now, self.theta, self.path)

        if self.theta >= -cfg.complete_tol:
            return ControlStepResult(
                u=self.u_prev.copy(), upsilon=0.0, ref=self.ref,
                eps_c=eps_c, eps_l=eps_l, theta=self.theta,
                qp_status="complete", qp_iterations=0, path_complete=True)

        first_solve = self.ref is None
        if first_solve:
            self.ref = self._init_ref(xi_now)

        # On the first solve the held-state reference is a poor anchor;
        # relinearize around the solution a few times before applying.
        passes = max(cfg.init_solves, 1) if first_solve else 1
        sol = None
        for _ in range(passes):
            prob, idx = build_qp(self.model, xi_now, self.theta, self.ref,
                                 self.path, self.spline, cfg,
                                 u_prev=self.u_prev / self.input_scale,
                                 ups_prev=self.ups_prev,
                                 soil_active=self.contacted)
            # The problem structure repeats step to step; equilibrate once
            # and reuse the scaling until the row pattern changes (e.g. at
            # soil contact).
            if self._scaling is not None and self._scaling.e.size != prob.m:
                self._scaling = None
                self._warm = None
            if self._scaling is None:
                self._scaling = qp.ruiz_equilibrate(prob.P, prob.A,
                                                    cfg.solver.ruiz_iters)
            sol = qp.solve(prob, warm=self._warm, tol=cfg.qp_tol,
                           max_iter=cfg.qp_max_iter, settings=cfg.solver,
                           scaling=self._scaling)
            if sol.status == "infeasible":
                break
            self._warm = sol
            if passes > 1:
                self.ref = ReferenceTrajectory(
                    Xi=np.vstack([sol.z[idx.xi(i)] for i in range(1, cfg.N + 1)]),
                    Theta=np.array([np.clip(sol.z[idx.theta(i)],
                                            self.path.theta_s, 0.0)
                                    for i in range(1, cfg.N + 1)]))

        # An unconverged iterate with large residuals is as unusable as an
        # infeasible problem: fall back to the previous input rather than
        # apply it.
        unreliable = (sol.status == "max_iter"
                      and max(sol.primal_residual, sol.dual_residual)
                      > 100.0 * cfg.qp_tol * max(1.0, _inf(prob.q)))
        if sol.status == "infeasible" or unreliable:
            self.fail_count += 1
            aborted = self.fail_count >= cfg.n_fail
            return ControlStepResult(
                u=self.u_prev.copy(), upsilon=0.0, ref=self.ref,
                eps_c=eps_c, eps_l=eps_l, theta=self.theta,
                qp_status=sol.status, qp_iterations=sol.iterations,
                fallback=True, aborted=aborted)
        self.fail_count = 0
        self._warm = (_shift_blocks(sol.z, idx),
                      _shift_warm_dual(sol.y, idx))

        N = cfg.N
        Xi_opt = np.vstack([sol.z[idx.xi(i)] for i in range(1, N + 1)])
        Theta_opt = np.array([sol.z[idx.theta(i)] for i in range(1, N + 1)])
        u0 = np.clip(sol.z[idx.u(1)] * self.input_scale,
                     self.cfg.u_min, self.cfg.u_max)
        ups0 = float(np.clip(sol.z[idx.ups(1)], 0.0, cfg.ups_max))

        # Shift one step, duplicating the tail, for the next linearization.
        self.ref = ReferenceTrajectory(
            Xi=np.vstack([Xi_opt[1:], Xi_opt[-1:]]),
            Theta=np.concatenate([Theta_opt[1:], Theta_opt[-1:]]))
        self.theta = float(np.clip(self.theta + ups0, self.path.theta_s, 0.0))
        self.u_prev = u0
        self.ups_prev = ups0
        return ControlStepResult(
            u=u0, upsilon=ups0, ref=self.ref, eps_c=eps_c, eps_l=eps_l,
            theta=self.theta, qp_status=sol.status,
            qp_iterations=sol.iterations,
            path_complete=self.theta >= -cfg.complete_tol)


@dataclass
class DigLog:
    """Per-step record of a closed-loop dig run."""

    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    z: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    vx: list = field(default_factory=list)
    eps_c: list = field(default_factory=list)
    eps_l: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    u: list = field(default_factory=list)
    upsilon: list = field(default_factory=list)
    qp_iters: list = field(default_factory=list)
    qp_status: list = field(default_factory=list)
    tip_path: list = field(default_factory=list)
    contact_step: int | None = None
    status: str = "incomplete"

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,x,z,phi,eps_c,eps_l,theta,ux,uz,uphi,upsilon,qp_iters,qp_status\n")
            for i in range(len(self.t)):
                u = self.u[i]
                fh.write(",".join([
                    repr(self.t[i]), repr(self.x[i]), repr(self.z[i]),
                    repr(self.phi[i]), repr(self.eps_c[i]), repr(self.eps_l[i]),
                    repr(self.theta[i]), repr(float(u[0])), repr(float(u[1])),
                    repr(float(u[2])), repr(self.upsilon[i]),
                    str(self.qp_iters[i]), self.qp_status[i],
                ]) + "\n")

    def mean_path_error(self, path, after_contact=True):
        """Mean minimum distance to the path over executed tip positions."""
        start = self.contact_step if (after_contact and self.contact_step is not None) else 0
        pts = np.column_stack([self.x[start:], self.z[start:]])
        if pts.size == 0:
            return float("nan")
        _, ref_pts = path.sample(n=1200)
        d2 = ((pts[:, None, :] - ref_pts[None, :, :]) ** 2).sum(axis=2)
        return float(np.mean(np.sqrt(d2.min(axis=1))))


def run_dig(sim_state, params, controller, max_steps=1000, dt=1.0 / 30.0):
    """Closed loop: measure, solve, apply, step the truth simulator.

    Stops on path completion, controller abort, simulator fault, or the
    step limit. Returns (log, final_sim_state).
    """
    from . import simulator

    log = DigLog()
    state = sim_state
    for k in range(max_steps):
        bucket, aux, _ = simulator.measure(state, params)
        res = controller.control_step(bucket, aux)

        log.t.append(k * dt)
        log.x.append(bucket.x)
        log.z.append(bucket.z)
        log.phi.append(bucket.phi)
        log.vx.append(aux.vx)
        log.eps_c.append(res.eps_c)
        log.eps_l.append(res.eps_l)
        log.theta.append(res.theta)
        log.u.append(res.u)
        log.upsilon.append(res.upsilon)
        log.qp_iters.append(res.qp_iterations)
        log.qp_status.append(res.qp_status)
        log.tip_path.append((bucket.x, bucket.z))
        if log.contact_step is None and controller.contacted:
            log.contact_step = k

        if res.path_complete:
            log.status = "complete"
            break
        if res.aborted:
            log.status = "aborted"
            break
        try:
            state = simulator.advance(state, res.u, params, dt)
        except simulator.SimulationDiverged:
            log.status = "diverged"
            break
        if not state.spline.contains(state.bucket.x):
            log.status = "domain_exit"
            break
    return log, state


def _inf(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _shift_blocks(v, idx):
    """Warm-start primal: advance the stacked solution one step, duplicating
    the tail block; the trailing slack is kept. Aligns the previous optimum
    with the shifted horizon."""
    out = v.copy()
    blk = idx.block
    out[:(idx.N - 1) * blk] = v[blk:idx.N * blk]
    return out


def _shift_warm_dual(y, idx):
    """Shift the dual blocks of each row section one step."""
    out = y.copy()
    at = 0
    for period, count in ((idx.order + 1, idx.N),            # dynamics + theta
                          (idx.soft_rows_per_step, idx.N),   # soft state boxes
                          (idx.hard_rows_per_step, idx.N)):  # hard rows
        if period == 0:
            continue
        sec = slice(at, at + period * count)
        out[sec.start:sec.stop - period] = y[sec.start + period:sec.stop]
        at += period * count
    return out


def scoop_path(spline, x_entry, length=3.0, depth=0.15, ramp_frac=0.3,
               n_points=13):
    """Digging path: enter at the surface, ramp to depth, dredge, ramp out.

    The cut is measured from the straight line between the surface heights
    at entry and exit, so the path follows the large-scale terrain trend.
    Returns (ContourPath, waypoints).
    """
    x_exit = x_entry + length
    s_in = spline.eval(x_entry).height
    s_out = spline.eval(x_exit).height
    ramp = max(min(ramp_frac, 0.45), 0.05)
    xs = np.linspace(x_entry, x_exit, n_points)
    frac = (xs - x_entry) / length
    prof = np.minimum(_smoothstep(frac / ramp), _smoothstep((1.0 - frac) / ramp))
    base = s_in + (s_out - s_in) * frac
    zs = base - depth * prof
    pts = np.column_stack([xs, zs])
    return path_from_waypoints(pts), pts


def desired_profile(path, x):
    """Path depth z(x) by dense sampling; x-monotone paths only."""
    _, pts = path.sample(n=1500)
    order = np.argsort(pts[:, 0])
    return np.interp(x, pts[order, 0], pts[order, 1])


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _eval_poly(coef, knots, tq):
    idx = np.clip(np.searchsorted(knots, tq, side="right") - 1, 0, len(knots) - 2)
    tau = tq - knots[idx]
    a, b, c, d = coef[idx, 0], coef[idx, 1], coef[idx, 2], coef[idx, 3]
    return a + tau * (b + tau * (c + tau * d))
