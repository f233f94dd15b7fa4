"""Soil surfaces: randomized generation, cubic-spline fitting, excavation.

A terrain is a uniform 1-D height field. A natural cubic spline fitted to
it provides the smooth surface s(x) with derivatives s' and s'' that the
model, simulator and controller consume.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from . import kernels
from .model import SoilLocal


@dataclass(frozen=True)
class HeightField:
    """Uniformly sampled terrain heights."""

    x0: float
    dx: float
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if not (self.dx > 0.0):
            raise ValueError("grid spacing must be positive")
        if h.ndim != 1 or h.size < 4:
            raise ValueError("height field needs at least 4 knots")
        if not np.all(np.isfinite(h)):
            raise ValueError("height field must be finite")
        h = h.copy()
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def x(self):
        return self.x0 + self.dx * np.arange(self.h.size)

    @property
    def x_end(self):
        return self.x0 + self.dx * (self.h.size - 1)


@dataclass(frozen=True)
class SurfaceSpline:
    """Natural cubic spline over a uniform knot grid.

    coef[i] = (a, b, c, d) of the cubic on interval i, in the local
    coordinate t = x - knot[i].
    """

    x0: float
    dx: float
    coef: np.ndarray

    def __post_init__(self):
        coef = np.ascontiguousarray(self.coef, dtype=float)
        if coef.ndim != 2 or coef.shape[1] != 4:
            raise ValueError("coef must have shape (nseg, 4)")
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)

    @property
    def domain(self):
        return (self.x0, self.x0 + self.dx * self.coef.shape[0])

    def packed(self):
        """Raw arrays consumed by the kernel evaluators."""
        return self.x0, self.dx, self.coef

    def contains(self, x):
        lo, hi = self.domain
        return lo <= x <= hi

    def eval(self, x):
        return eval_soil(self, x)


@dataclass(frozen=True)
class TerrainGenParams:
    """Randomized terrain: base plane plus signed Gaussian bumps."""

    base_height: float = 0.0
    gradient_range: float = 0.08
    n_gaussians: int = 4
    amplitude_range: tuple = (-0.25, 0.25)
    sigma_range: tuple = (0.4, 1.2)
    extent: float = 8.0
    dx: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_gaussians < 0:
            raise ValueError("n_gaussians must be nonnegative")
        if not (self.sigma_range[0] > 0.0 and self.sigma_range[1] >= self.sigma_range[0]):
            raise ValueError("sigma_range must be positive and ordered")
        if not (self.extent > 0.0 and self.dx > 0.0):
            raise ValueError("extent and dx must be positive")


def random_terrain(params):
    """Draw a height field from the seeded generator.

    h(x) = base + g*(x - x_mid) + sum_i a_i exp(-(x - c_i)^2 / (2 s_i^2))
    with g, a_i, c_i, s_i uniform over the configured ranges.
    """
    rng = np.random.default_rng(params.seed)
    n = int(round(params.extent / params.dx)) + 1
    x = params.dx * np.arange(n)
    x_mid = 0.5 * params.extent
    grad = rng.uniform(-params.gradient_range, params.gradient_range) if params.gradient_range > 0 else 0.0
    h = params.base_height + grad * (x - x_mid)
    for _ in range(params.n_gaussians):
        a = rng.uniform(*params.amplitude_range)
        c = rng.uniform(0.0, params.extent)
        sig = rng.uniform(*params.sigma_range)
        h = h + a * np.exp(-((x - c) ** 2) / (2.0 * sig ** 2))
    return HeightField(x0=0.0, dx=params.dx, h=h)


def fit_spline(field):
    """Natural cubic spline interpolating every knot of the height field."""
    coef = natural_cubic_coefficients(field.x, np.asarray(field.h, dtype=float))
    return SurfaceSpline(x0=field.x0, dx=field.dx, coef=coef)


def natural_cubic_coefficients(t, y):
    """Per-interval cubic coefficients of the natural interpolating spline.

    Knots may be non-uniform. Natural end conditions: second derivative
    zero at both ends.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    n = t.size
    if n < 4:
        raise ValueError("spline fit needs at least 4 knots")
    h = np.diff(t)
    if np.any(h <= 0.0):
        raise ValueError("knots must be strictly increasing")

    # Tridiagonal system for interior second derivatives.
    m = np.zeros(n)
    if n > 2:
        rhs = 6.0 * (np.diff(y[1:]) / h[1:] - np.diff(y[:-1]) / h[:-1])
        ab = np.zeros((3, n - 2))
        ab[0, 1:] = h[1:-1]                      # upper diagonal
        ab[1, :] = 2.0 * (h[:-1] + h[1:])        # main diagonal
        ab[2, :-1] = h[1:-1]                     # lower diagonal
        m[1:-1] = solve_banded((1, 1), ab, rhs)

    a = y[:-1]
    b = np.diff(y) / h - h * (2.0 * m[:-1] + m[1:]) / 6.0
    c = m[:-1] / 2.0
    d = (m[1:] - m[:-1]) / (6.0 * h)
    return np.column_stack([a, b, c, d])


def eval_soil(spline, x):
    """Height, slope and curvature of the surface at abscissa x.

    Out-of-domain queries evaluate at the nearest domain edge and are
    flagged `clamped`.
    """
    x = float(x)
    clamped = not spline.contains(x)
    s, s1, s2 = kernels.spline_eval(spline.x0, spline.dx, spline.coef, x)
    return SoilLocal(height=s, slope=s1, curvature=s2, clamped=clamped)


def excavate(field, tip_path):
    """Lower the height field to the swept envelope of a tool-tip path.

    Each node takes the pointwise minimum of its height and the piecewise
    linear interpolation of the path wherever a path segment spans the
    node. Material only ever gets removed, never added.
    """
    pts = [(float(px), float(pz)) for (px, pz) in tip_path]
    if len(pts) < 2:
        return field
    h = np.array(field.h, dtype=float)
    x = field.x
    for (x1, z1), (x2, z2) in zip(pts[:-1], pts[1:]):
        lo, hi = (x1, x2) if x1 <= x2 else (x2, x1)
        i0 = int(np.ceil((lo - field.x0) / field.dx - 1e-12))
        i1 = int(np.floor((hi - field.x0) / field.dx + 1e-12))
        i0 = max(i0, 0)
        i1 = min(i1, h.size - 1)
        if i1 < i0:
            continue
        if x2 == x1:
            z = np.full(i1 - i0 + 1, min(z1, z2))
        else:
            z = z1 + (x[i0:i1 + 1] - x1) * (z2 - z1) / (x2 - x1)
        np.minimum(h[i0:i1 + 1], z, out=h[i0:i1 + 1])
    return HeightField(x0=field.x0, dx=field.dx, h=h)


def save_terrain(field, path, gen_params=None):
    """Write a terrain CSV (`x,h` per knot) plus a JSON parameter sidecar."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "h"])
        for xv, hv in zip(field.x, field.h):
            writer.writerow([repr(float(xv)), repr(float(hv))])
    if gen_params is not None:
        sidecar = {
            "base_height": gen_params.base_height,
            "gradient_range": gen_params.gradient_range,
            "n_gaussians": gen_params.n_gaussians,
            "amplitude_range": list(gen_params.amplitude_range),
            "sigma_range": list(gen_params.sigma_range),
            "extent": gen_params.extent,
            "dx": gen_params.dx,
            "seed": gen_params.seed,
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=1)
            fh.write("\n")


def load_terrain(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "h"]:
            raise ValueError(f"{path}: expected header 'x,h', got {header}")
        xs, hs = [], []
        for i, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ValueError(f"{path}: row {i}, expected 2 fields, got {len(row)}")
            xs.append(float(row[0]))
            hs.append(float(row[1]))
    x = np.array(xs)
    if x.size < 4:
        raise ValueError(f"{path}: terrain needs at least 4 knots")
    dx = x[1] - x[0]
    if not np.allclose(np.diff(x), dx, rtol=0.0, atol=1e-9 * max(abs(dx), 1.0)):
        raise ValueError(f"{path}: terrain grid must be uniform")
    return HeightField(x0=float(x[0]), dx=float(dx), h=np.array(hs))
