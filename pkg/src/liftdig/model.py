"""Lifted linear bucket-soil model: domain types and model operations.

The lifted state stacks the six independent bucket states with the eight
auxiliary variables (velocities, soil reactions, captured-soil inertias).
The ordering below is canonical: every matrix, dataset column and
serialized model in this package depends on it.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import kernels

XI_NAMES = (
    "x", "z", "phi", "px", "pz", "pphi",
    "vx", "vz", "omega", "etx", "etz", "etphi", "msoil", "isoil",
)
XI_DIM = 14
NX = 6      # independent bucket states
NAUX = 8    # auxiliary variables
NU = 3      # actuator forces and torque
NSOIL = 2   # soil profile input (height, slope)

# Indices into the lifted vector.
IX_X, IX_Z, IX_PHI, IX_PX, IX_PZ, IX_PPHI = range(6)
IX_VX, IX_VZ, IX_OMEGA, IX_ETX, IX_ETZ, IX_ETPHI, IX_MSOIL, IX_ISOIL = range(6, 14)

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BucketState:
    """Tip position, orientation and momenta of the bucket-soil body."""

    x: float
    z: float
    phi: float
    px: float
    pz: float
    pphi: float

    def as_array(self):
        return np.array([self.x, self.z, self.phi, self.px, self.pz, self.pphi])

    def normalized(self):
        """Same state with phi wrapped into [-pi, pi]."""
        phi = math.remainder(self.phi, 2.0 * math.pi)
        return BucketState(self.x, self.z, phi, self.px, self.pz, self.pphi)


@dataclass(frozen=True)
class AuxVars:
    """Outputs of the nonlinear elements: velocities, soil reactions, soil inertias."""

    vx: float
    vz: float
    omega: float
    etx: float
    etz: float
    etphi: float
    m_soil: float
    i_soil: float

    def __post_init__(self):
        if self.m_soil < 0.0 or self.i_soil < 0.0:
            raise ValueError("captured-soil mass and inertia must be nonnegative")

    def as_array(self):
        return np.array([self.vx, self.vz, self.omega, self.etx, self.etz,
                         self.etphi, self.m_soil, self.i_soil])


@dataclass(frozen=True)
class ControlInput:
    """Actuator forces (N) and torque (N*m) on the bucket."""

    ux: float
    uz: float
    uphi: float

    def as_array(self):
        return np.array([self.ux, self.uz, self.uphi])


@dataclass(frozen=True)
class SoilLocal:
    """Soil surface height, slope and (optionally) curvature at one abscissa.

    `clamped` flags an out-of-domain query answered at the domain edge.
    """

    height: float
    slope: float
    curvature: float | None = None
    clamped: bool = False

    def as_input(self):
        """The 2-vector (height, slope) that drives the lifted model."""
        return np.array([self.height, self.slope])


@dataclass(frozen=True)
class StateBounds:
    """Elementwise lower/upper limits on the lifted state."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be equal-length vectors")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", _frozen(lo))
        object.__setattr__(self, "upper", _frozen(hi))


@dataclass(frozen=True)
class DiscreteLiftedModel:
    """Discrete-time lifted model xi' = A xi + B u + Bs (s, s')."""

    A: np.ndarray
    B: np.ndarray
    Bs: np.ndarray
    dt: float
    bounds: StateBounds | None = None
    names: tuple = XI_NAMES

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        Bs = np.asarray(self.Bs, dtype=float)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        if B.shape != (n, NU):
            raise ValueError(f"B must be {n}x{NU}, got {B.shape}")
        if Bs.shape != (n, NSOIL):
            raise ValueError(f"Bs must be {n}x{NSOIL}, got {Bs.shape}")
        if not (self.dt > 0.0):
            raise ValueError("dt must be positive")
        for mat in (A, B, Bs):
            if not np.all(np.isfinite(mat)):
                raise ValueError("model matrices must be finite")
        if self.bounds is not None and self.bounds.lower.shape[0] != n:
            raise ValueError("bounds dimension does not match model order")
        if len(self.names) != n:
            raise ValueError("names length does not match model order")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "B", _frozen(B))
        object.__setattr__(self, "Bs", _frozen(Bs))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def order(self):
        return self.A.shape[0]


@dataclass(frozen=True)
class ContinuousDflModel:
    """Continuous-time lifted model with exact structural top rows.

    The first NX rows of (Ac, Bc) are fixed by the bucket state equations:
    position rates select the velocity auxiliaries with +1, momentum rates
    select the soil reactions with -1 and the inputs with +1. Only the
    auxiliary-dynamics rows are regressed; Hcs holds their soil-input
    columns.
    """

    Ac: np.ndarray
    Bc: np.ndarray
    Hcs: np.ndarray | None = None

    def __post_init__(self):
        Ac = np.asarray(self.Ac, dtype=float)
        Bc = np.asarray(self.Bc, dtype=float)
        if Ac.shape != (XI_DIM, XI_DIM) or Bc.shape != (XI_DIM, NU):
            raise ValueError("continuous model must be 14x14 / 14x3")
        ax, bx = structural_rows()
        if not (np.array_equal(Ac[:NX], ax) and np.array_equal(Bc[:NX], bx)):
            raise ValueError("top structural rows do not match the bucket state equations")
        object.__setattr__(self, "Ac", _frozen(Ac))
        object.__setattr__(self, "Bc", _frozen(Bc))
        if self.Hcs is not None:
            Hcs = np.asarray(self.Hcs, dtype=float)
            if Hcs.shape != (NAUX, NSOIL):
                raise ValueError(f"Hcs must be {NAUX}x{NSOIL}")
            object.__setattr__(self, "Hcs", _frozen(Hcs))


def structural_rows():
    """Exact first-six rows (Ac, Bc) of the continuous lifted dynamics."""
    ax = np.zeros((NX, XI_DIM))
    ax[IX_X, IX_VX] = 1.0
    ax[IX_Z, IX_VZ] = 1.0
    ax[IX_PHI, IX_OMEGA] = 1.0
    ax[IX_PX, IX_ETX] = -1.0
    ax[IX_PZ, IX_ETZ] = -1.0
    ax[IX_PPHI, IX_ETPHI] = -1.0
    bx = np.zeros((NX, NU))
    bx[IX_PX, 0] = 1.0
    bx[IX_PZ, 1] = 1.0
    bx[IX_PPHI, 2] = 1.0
    return ax, bx


def lift(state, aux):
    """Stack bucket state and auxiliary variables into the 14-vector."""
    return np.concatenate([state.as_array(), aux.as_array()])


def split(xi):
    """Inverse of lift: recover (BucketState, AuxVars) from a 14-vector."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (XI_DIM,):
        raise ValueError(f"lifted state must have shape ({XI_DIM},)")
    return (BucketState(*xi[:NX]), AuxVars(*xi[NX:]))


def step(model, xi, u, soil):
    """One discrete transition xi' = A xi + B u + Bs (s, s')."""
    xi = np.asarray(xi, dtype=float)
    uv = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    sv = soil.as_input() if isinstance(soil, SoilLocal) else np.asarray(soil, dtype=float)
    if xi.shape != (model.order,):
        raise ValueError(f"state dimension {xi.shape} does not match model order {model.order}")
    if uv.shape != (NU,) or sv.shape != (NSOIL,):
        raise ValueError("input dimensions do not match the model")
    for name, v in (("state", xi), ("input", uv), ("soil input", sv)):
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite {name}: {v}")
    return model.A @ xi + model.B @ uv + model.Bs @ sv


def rollout(model, xi0, inputs, surface):
    """Open-loop prediction over a sequence of inputs.

    Soil inputs are evaluated from `surface` at the *predicted* horizontal
    position of each step. If a predicted position leaves the surface
    domain the rollout truncates there.

    Returns (traj, truncated): traj rows are xi_0..xi_k, one more row than
    the number of executed steps; truncated is True when the surface domain
    was exited before all inputs were consumed.
    """
    xi0 = np.asarray(xi0, dtype=float)
    U = _input_matrix(inputs)
    if U.shape[0] == 0:
        raise ValueError("rollout requires at least one input")
    if not np.all(np.isfinite(xi0)):
        raise ValueError("non-finite initial state")
    x0, dx, coef = surface.packed()
    xlo, xhi = surface.domain
    traj, done = kernels.lifted_rollout(
        np.ascontiguousarray(model.A), np.ascontiguousarray(model.B),
        np.ascontiguousarray(model.Bs), np.ascontiguousarray(xi0),
        np.ascontiguousarray(U), x0, dx, coef, xlo, xhi)
    return traj[:done + 1], done < U.shape[0]


def discretize(cmodel, dt, bounds=None):
    """Zero-order-hold discretization of a continuous lifted model."""
    if cmodel.Hcs is not None:
        Bcs = np.vstack([np.zeros((NX, NSOIL)), cmodel.Hcs])
    else:
        Bcs = np.zeros((XI_DIM, NSOIL))
    A, Bd = discretize_matrices(cmodel.Ac, np.hstack([cmodel.Bc, Bcs]), dt)
    return DiscreteLiftedModel(A=A, B=Bd[:, :NU], Bs=Bd[:, NU:], dt=dt, bounds=bounds)


def discretize_matrices(Ac, Bc, dt):
    """Zero-order-hold (A, B) for dxi/dt = Ac xi + Bc v.

    A = exp(Ac*dt); B uses Ac^-1 (A - I) Bc when Ac is well conditioned
    and otherwise the equivalent series sum_k dt^(k+1) Ac^k / (k+1)! Bc,
    which needs no inverse.
    """
    if not (dt > 0.0):
        raise ValueError("dt must be positive")
    Ac = np.asarray(Ac, dtype=float)
    Bc = np.asarray(Bc, dtype=float)
    n = Ac.shape[0]
    A = expm(Ac * dt)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix exponential produced non-finite entries")
    if _is_well_conditioned(Ac):
        Bd = np.linalg.solve(Ac, (A - np.eye(n)) @ Bc)
    else:
        Bd = _input_series(Ac, dt) @ Bc
    if not np.all(np.isfinite(Bd)):
        raise ValueError("discretized input matrix has non-finite entries")
    return A, Bd


def input_series(Ac, dt):
    """The integral series sum_k dt^(k+1) Ac^k / (k+1)! used by discretize.

    Exposed so the inverse-free route can be cross-checked against the
    inverse formula.
    """
    return _input_series(np.asarray(Ac, dtype=float), dt)


def save_model(model, path):
    """Serialize a discrete model to a single JSON document.

    Floats are written with round-trip precision, so save/load is
    bit-exact for finite doubles.
    """
    if model.bounds is not None:
        bounds = {"lower": list(model.bounds.lower), "upper": list(model.bounds.upper)}
    else:
        bounds = None
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "dt": model.dt,
        "ordering": list(model.names),
        "A": model.A.tolist(),
        "B": model.B.tolist(),
        "B_s": model.Bs.tolist(),
        "bounds": bounds,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')!r}")
    bounds = None
    if doc.get("bounds") is not None:
        bounds = StateBounds(np.array(doc["bounds"]["lower"]),
                             np.array(doc["bounds"]["upper"]))
    return DiscreteLiftedModel(
        A=np.array(doc["A"], dtype=float),
        B=np.array(doc["B"], dtype=float),
        Bs=np.array(doc["B_s"], dtype=float),
        dt=float(doc["dt"]),
        bounds=bounds,
        names=tuple(doc["ordering"]),
    )


def _input_matrix(inputs):
    rows = [u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
            for u in inputs]
    if not rows:
        return np.zeros((0, NU))
    U = np.vstack(rows)
    if U.shape[1] != NU:
        raise ValueError("inputs must be 3-vectors")
    if not np.all(np.isfinite(U)):
        raise ValueError("non-finite input sequence")
    return U


def _is_well_conditioned(Ac, rcond_min=1e-9):
    sv = np.linalg.svd(Ac, compute_uv=False)
    return sv[-1] > rcond_min * max(sv[0], 1.0)


def _input_series(Ac, dt, max_terms=80, rtol=1e-16):
    n = Ac.shape[0]
    term = dt * np.eye(n)
    total = term.copy()
    for k in range(1, max_terms):
        term = term @ Ac * (dt / (k + 1.0))
        total += term
        if np.max(np.abs(term)) <= rtol * max(np.max(np.abs(total)), 1.0):
            break
    return total


def _frozen(arr):
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out
