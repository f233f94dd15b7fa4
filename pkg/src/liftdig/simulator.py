"""Deterministic nonlinear ground-truth simulator of planar bucket-soil digging.

The bucket is a planar rigid body whose momenta respond to actuator inputs
and to resistive soil reactions. Cutting resistance grows with depth
(quadratic plus linear), saturates with velocity through tanh terms, and
the captured soil adds mass and moment of inertia up to the bucket
capacity. Gravity is folded into the vertical reaction so the momentum
balance reads pdot = -e_T + u verbatim. Moments are taken about the bucket
tip with counterclockwise positive; gravity is assumed to act at the tip
and therefore exerts no moment.
"""

import json
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import kernels
from .model import AuxVars, BucketState, ControlInput
from .terrain import eval_soil


class SimulationDiverged(RuntimeError):
    """State magnitude exceeded the divergence guard; trajectory is invalid."""

    def __init__(self, state):
        super().__init__("simulation diverged")
        self.state = state


@dataclass(frozen=True)
class SimParams:
    """Physical and numerical parameters of the truth simulator.

    c1/c2 scale the depth-quadratic/linear horizontal cutting resistance,
    c3 a linear drag in vx; c4/c5 the vertical counterparts; c6 couples the
    reaction moment to the horizontal cut force, c7 adds a rotational
    resistance; v_ref/omega_ref set the tanh saturation scales.
    """

    m_bucket: float = 300.0
    i_bucket: float = 60.0
    rho_soil: float = 1600.0
    width: float = 0.6
    gravity: float = 9.81
    c1: float = 1.2e4
    c2: float = 5.0e3
    c3: float = 5.0e2
    c4: float = 1.2e4
    c5: float = 5.0e3
    c6: float = 0.3
    c7: float = 2.0e3
    v_ref: float = 0.5
    omega_ref: float = 0.8
    r_gyr: float = 0.25
    m_cap: float = 150.0
    phi_fill: float = 0.0
    dt_sim: float = 1.0 / 300.0

    def __post_init__(self):
        for name in ("m_bucket", "i_bucket", "rho_soil", "width",
                     "v_ref", "omega_ref", "r_gyr", "m_cap"):
            if not (getattr(self, name) > 0.0):
                raise ValueError(f"{name} must be strictly positive")
        if not (0.0 < self.dt_sim <= 0.1):
            raise ValueError("dt_sim must be in (0, 0.1] s")

    def packed(self):
        """Parameter vector in the kernel packing order."""
        return np.array([getattr(self, n) for n in kernels.SIM_PARAM_NAMES])

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass(frozen=True)
class SimState:
    """Simulator state: bucket body, captured soil, and the pass surface.

    Velocities and soil reactions are derived quantities (see measure), so
    v = p/m holds exactly at all times by construction.
    """

    bucket: BucketState
    m_soil: float
    i_soil: float
    spline: "SurfaceSpline"

    def packed(self):
        b = self.bucket
        return np.array([b.x, b.z, b.phi, b.px, b.pz, b.pphi,
                         self.m_soil, self.i_soil])


def spawn(spline, params, x_start, clearance=0.05, phi=0.0):
    """Bucket at rest with the tip just above the surface at x_start."""
    soil = eval_soil(spline, x_start)
    bucket = BucketState(x=x_start, z=soil.height + clearance, phi=phi,
                         px=0.0, pz=0.0, pphi=0.0)
    return SimState(bucket=bucket, m_soil=0.0, i_soil=0.0, spline=spline)


def soil_reaction(state, params):
    """Soil reaction forces/moment and soil capture rates at this state.

    Returns (etx, etz, etphi, mdot_soil, idot_soil). The vertical reaction
    includes the weight of bucket plus captured soil; at zero cutting depth
    the reaction reduces to that weight (free flight).
    """
    b = state.bucket
    soil = eval_soil(state.spline, b.x)
    d = max(0.0, soil.height - b.z)
    p = params
    m = p.m_bucket + state.m_soil
    inertia = p.i_bucket + state.i_soil
    vx = b.px / m
    vz = b.pz / m
    om = b.pphi / inertia

    etx = (p.c1 * d * d + p.c2 * d) * np.tanh(vx / p.v_ref) + p.c3 * d * vx
    etz = (p.c4 * d * d + p.c5 * d) * np.tanh(vz / p.v_ref) + m * p.gravity
    etphi = p.c6 * d * etx + p.c7 * d * d * np.tanh(om / p.omega_ref)

    if state.m_soil >= p.m_cap:
        mdot = 0.0
    else:
        mdot = (p.rho_soil * p.width * d * max(vx, 0.0)
                * max(np.cos(b.phi - p.phi_fill), 0.0))
    idot = mdot * p.r_gyr ** 2
    return float(etx), float(etz), float(etphi), float(mdot), float(idot)


def sim_step(state, u, params):
    """One semi-implicit Euler substep of length params.dt_sim.

    Soil reactions are evaluated at the pre-step state, momenta update
    explicitly, then captured soil integrates (capped at capacity), and
    positions advance with the post-step velocities.
    """
    return advance(state, u, params, params.dt_sim, n_sub=1)


def advance(state, u, params, dt, n_sub=None):
    """Advance by dt seconds, substepping at params.dt_sim or finer."""
    if n_sub is None:
        n_sub = max(1, int(np.ceil(dt / params.dt_sim - 1e-12)))
    h = dt / n_sub
    uv = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    x0, dx, coef = state.spline.packed()
    out, diverged = kernels.sim_substeps(state.packed(), uv, n_sub, h,
                                         params.packed(), x0, dx, coef)
    new_state = SimState(
        bucket=BucketState(*out[:6]),
        m_soil=float(out[6]),
        i_soil=float(out[7]),
        spline=state.spline,
    )
    if diverged:
        raise SimulationDiverged(new_state)
    return new_state


def measure(state, params):
    """Noiseless readout of all lifted variables plus the local soil input.

    The soil height/slope are evaluated from the pass surface spline at
    the current tip abscissa.
    """
    b = state.bucket
    m = params.m_bucket + state.m_soil
    inertia = params.i_bucket + state.i_soil
    etx, etz, etphi, _, _ = soil_reaction(state, params)
    aux = AuxVars(vx=b.px / m, vz=b.pz / m, omega=b.pphi / inertia,
                  etx=etx, etz=etz, etphi=etphi,
                  m_soil=state.m_soil, i_soil=state.i_soil)
    return b, aux, eval_soil(state.spline, b.x)


def with_spline(state, spline):
    """Same physical state evaluated against a different pass surface."""
    return replace(state, spline=spline)
