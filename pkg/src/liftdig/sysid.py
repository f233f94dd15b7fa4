"""Regression of lifted linear models and prediction-error scoring.

Three liftings are supported: the measured 14-dimensional lifted state as
is ("dfl", order 14), degree-2 polynomial observables of the six bucket
states ("koop", order 27), and degree-2 polynomial observables of the full
lifted state ("koopdfl", order 119). All of them regress the one-step
transition matrices jointly with the input and soil-input channels from
logged episodes.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .model import (NAUX, NSOIL, NU, NX, XI_DIM, XI_NAMES, ContinuousDflModel,
                    DiscreteLiftedModel, StateBounds, structural_rows)

LIFTING_NAMES = ("dfl", "koop", "koopdfl")


class InsufficientDataError(ValueError):
    """Fewer transition pairs than regressor dimensions."""


def poly_observables(v, degree=2):
    """Degree-2 polynomial dictionary: the vector itself plus all distinct
    pairwise products v_i v_j (i <= j). No constant term.

    Accepts a single vector or a matrix of row vectors.
    """
    if degree != 2:
        raise ValueError("only degree-2 observables are supported")
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    rows = v[None, :] if single else v
    n = rows.shape[1]
    iu, ju = np.triu_indices(n)
    out = np.hstack([rows, rows[:, iu] * rows[:, ju]])
    return out[0] if single else out


def poly_dim(n, degree=2):
    if degree != 2:
        raise ValueError("only degree-2 observables are supported")
    return n + n * (n + 1) // 2


@dataclass(frozen=True)
class Lifting:
    """Maps logged 14-dim lifted rows to the regression coordinates."""

    name: str

    @property
    def order(self):
        return {"dfl": XI_DIM, "koop": poly_dim(NX), "koopdfl": poly_dim(XI_DIM)}[self.name]

    def apply(self, xi_rows):
        xi_rows = np.atleast_2d(np.asarray(xi_rows, dtype=float))
        if self.name == "dfl":
            return xi_rows
        if self.name == "koop":
            return poly_observables(xi_rows[:, :NX])
        if self.name == "koopdfl":
            return poly_observables(xi_rows)
        raise ValueError(f"unknown lifting {self.name!r}")

    def coordinate_names(self):
        if self.name == "dfl":
            return XI_NAMES
        base = XI_NAMES[:NX] if self.name == "koop" else XI_NAMES
        iu, ju = np.triu_indices(len(base))
        prods = tuple(f"{base[i]}*{base[j]}" for i, j in zip(iu, ju))
        return tuple(base) + prods


def lifting_for_order(order):
    """Recover the lifting from a stored model's order."""
    for name in LIFTING_NAMES:
        lf = Lifting(name)
        if lf.order == order:
            return lf
    raise ValueError(f"no known lifting of order {order}")


def transition_arrays(dataset, lifting):
    """Stacked (targets, regressors) over all within-episode pairs.

    Regressor rows are [zeta_k, u_k, s_k]; target rows are zeta_{k+1}.
    Pairs never cross episode boundaries.
    """
    lf = lifting if isinstance(lifting, Lifting) else Lifting(lifting)
    tgt, reg = [], []
    for ep in dataset.episodes:
        if len(ep) < 2:
            continue
        Z = lf.apply(ep.xi)
        tgt.append(Z[1:])
        reg.append(np.hstack([Z[:-1], ep.u[:-1], ep.s[:-1]]))
    if not tgt:
        return np.zeros((0, lf.order)), np.zeros((0, lf.order + NU + NSOIL))
    return np.vstack(tgt), np.vstack(reg)


def regress_lifted(dataset, lifting="dfl", ridge=0.0, p_lo=10.0, p_hi=90.0):
    """Least-squares fit of (A, B, Bs) for the chosen lifting.

    Regressor columns are scaled to unit RMS internally for conditioning
    and the solution is mapped back to physical units. Rank deficiency
    produces the minimum-norm solution with a warning.
    """
    lf = lifting if isinstance(lifting, Lifting) else Lifting(lifting)
    targets, regressors = transition_arrays(dataset, lf)
    n_pairs, n_reg = regressors.shape
    if n_pairs < n_reg:
        raise InsufficientDataError(
            f"insufficient data: {n_pairs} transition pairs for {n_reg} regressors")
    if not (np.all(np.isfinite(targets)) and np.all(np.isfinite(regressors))):
        raise ValueError("dataset contains non-finite entries")

    G = _scaled_lstsq(regressors, targets, ridge)
    order = lf.order
    A = G[:, :order]
    B = G[:, order:order + NU]
    Bs = G[:, order + NU:]
    lifted_rows = lf.apply(dataset.xi_rows())
    bounds = compute_bounds_rows(lifted_rows, p_lo, p_hi)
    dt = dataset.episodes[0].dt
    return DiscreteLiftedModel(A=A, B=B, Bs=Bs, dt=dt, bounds=bounds,
                               names=lf.coordinate_names())


def dfl_structured_fit(dataset, ridge=0.0):
    """Continuous-time fit with the exact structural top rows.

    Only the auxiliary-dynamics rows are regressed, against central
    differences of the logged auxiliary variables at interior samples.
    The six structural rows are constants of the system structure and do
    not depend on the data.
    """
    tgt, reg = [], []
    for ep in dataset.episodes:
        if len(ep) < 3:
            continue
        dt = ep.dt
        eta = ep.xi[:, NX:]
        etadot = (eta[2:] - eta[:-2]) / (2.0 * dt)
        tgt.append(etadot)
        reg.append(np.hstack([ep.xi[1:-1], ep.u[1:-1], ep.s[1:-1]]))
    if not tgt:
        raise InsufficientDataError("insufficient data: no interior samples")
    targets = np.vstack(tgt)
    regressors = np.vstack(reg)
    if regressors.shape[0] < regressors.shape[1]:
        raise InsufficientDataError(
            f"insufficient data: {regressors.shape[0]} interior samples for "
            f"{regressors.shape[1]} regressors")

    H = _scaled_lstsq(regressors, targets, ridge)
    ax, bx = structural_rows()
    Ac = np.vstack([ax, H[:, :XI_DIM]])
    Bc = np.vstack([bx, H[:, XI_DIM:XI_DIM + NU]])
    Hcs = H[:, XI_DIM + NU:]
    return ContinuousDflModel(Ac=Ac, Bc=Bc, Hcs=Hcs)


def compute_bounds(dataset, p_lo=10.0, p_hi=90.0):
    """Nearest-rank percentile bounds per lifted-state dimension."""
    return compute_bounds_rows(dataset.xi_rows(), p_lo, p_hi)


def compute_bounds_rows(rows, p_lo=10.0, p_hi=90.0):
    rows = np.asarray(rows, dtype=float)
    if rows.size == 0:
        raise ValueError("empty data")
    lo = np.apply_along_axis(_nearest_rank, 0, rows, p_lo)
    hi = np.apply_along_axis(_nearest_rank, 0, rows, p_hi)
    return StateBounds(lower=lo, upper=hi)


def _nearest_rank(col, pct):
    srt = np.sort(col)
    n = srt.size
    k = int(np.ceil(pct / 100.0 * n))
    k = min(max(k, 1), n)
    return srt[k - 1]


def spectral_radius(model):
    """Largest eigenvalue magnitude of the transition matrix."""
    try:
        eig = np.linalg.eigvals(model.A)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("eigensolver failed to converge") from exc
    return float(np.max(np.abs(eig)))


@dataclass
class MseTable:
    """Prediction MSE of (x, z, phi) per horizon, with sample counts."""

    variables: tuple
    horizons: tuple
    mse: dict            # (variable, horizon) -> float
    counts: dict         # horizon -> number of (start, episode) samples

    def mean_over_variables(self, horizon):
        return float(np.mean([self.mse[(v, horizon)] for v in self.variables]))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("variable,horizon,mse\n")
            for v in self.variables:
                for h in self.horizons:
                    fh.write(f"{v},{h},{self.mse[(v, h)]!r}\n")


def eval_prediction_mse(model, testset, horizons, n_starts=50, seed=0):
    """Multi-horizon open-loop prediction error on logged test episodes.

    From each sampled start the model is rolled out with the recorded
    inputs and soil inputs evaluated from the episode terrain at the
    predicted positions. Starts whose episode remainder is shorter than a
    horizon are skipped for that horizon. Position entries (x, z, phi) are
    scored against the logged ground truth.
    """
    from . import kernels

    horizons = sorted(int(h) for h in horizons)
    if horizons[0] < 1:
        raise ValueError("horizons must be >= 1")
    max_h = horizons[-1]
    lf = lifting_for_order(model.order)
    rng = np.random.default_rng(seed)
    variables = ("x", "z", "phi")
    sq = {(v, h): 0.0 for v in variables for h in horizons}
    counts = {h: 0 for h in horizons}

    A = np.ascontiguousarray(model.A)
    B = np.ascontiguousarray(model.B)
    Bs = np.ascontiguousarray(model.Bs)

    for ep in testset.episodes:
        if len(ep) < 2:
            continue
        if ep.spline is None:
            raise ValueError("episode has no terrain spline attached")
        x0s, dxs, coefs = ep.spline.packed()
        xlo, xhi = ep.spline.domain
        n_valid = len(ep) - 1
        if n_starts is None:
            starts = np.arange(n_valid)
        else:
            starts = rng.choice(n_valid, size=min(n_starts, n_valid), replace=False)
        Zfull = lf.apply(ep.xi)
        for k0 in starts:
            n_ahead = min(max_h, len(ep) - 1 - k0)
            if n_ahead < horizons[0]:
                continue
            traj, done = kernels.lifted_rollout(
                A, B, Bs, np.ascontiguousarray(Zfull[k0]),
                np.ascontiguousarray(ep.u[k0:k0 + n_ahead]),
                x0s, dxs, coefs, xlo, xhi)
            for h in horizons:
                if h > done:
                    continue
                err = traj[h, :3] - ep.xi[k0 + h, :3]
                for i, v in enumerate(variables):
                    sq[(v, h)] += err[i] ** 2
                counts[h] += 1

    mse = {}
    for v in variables:
        for h in horizons:
            mse[(v, h)] = sq[(v, h)] / counts[h] if counts[h] else float("nan")
    return MseTable(variables=variables, horizons=tuple(horizons), mse=mse,
                    counts=counts)


def split_dataset(dataset, train_frac=0.8, seed=0):
    """Split by whole episodes into (train, test), seeded."""
    from .datagen import Dataset

    n = len(dataset.episodes)
    idx = np.random.default_rng(seed).permutation(n)
    n_train = max(1, int(round(train_frac * n))) if n > 1 else n
    n_train = min(n_train, n - 1) if n > 1 else n
    train_ids = set(idx[:n_train])
    train = [ep for i, ep in enumerate(dataset.episodes) if i in train_ids]
    test = [ep for i, ep in enumerate(dataset.episodes) if i not in train_ids]
    return (Dataset(episodes=train, manifest=dict(dataset.manifest)),
            Dataset(episodes=test, manifest=dict(dataset.manifest)))


def training_report(model, dataset, variant):
    """Summary statistics recorded next to every trained model."""
    lf = lifting_for_order(model.order)
    targets, regressors = transition_arrays(dataset, lf)
    G = np.hstack([model.A, model.B, model.Bs])
    resid = targets - regressors @ G.T
    rho = spectral_radius(model)
    if rho > 1.0:
        warnings.warn(f"regressed {variant} model is dynamically unstable "
                      f"(spectral radius {rho:.4f})")
    return {
        "variant": variant,
        "order": model.order,
        "N_D": int(targets.shape[0]),
        "spectral_radius": rho,
        "residual_rms": float(np.sqrt(np.mean(resid ** 2))),
        "bounds": {
            "lower": list(map(float, model.bounds.lower)),
            "upper": list(map(float, model.bounds.upper)),
        } if model.bounds is not None else None,
        "bs_row_maxabs": [float(v) for v in np.max(np.abs(model.Bs), axis=1)],
    }


def _scaled_lstsq(regressors, targets, ridge):
    """Min-norm least squares with unit-RMS column equilibration."""
    scale = np.sqrt(np.mean(regressors ** 2, axis=0))
    scale[scale < 1e-12] = 1.0
    Rs = regressors / scale
    if ridge > 0.0:
        n = Rs.shape[1]
        Rs = np.vstack([Rs, np.sqrt(ridge) * np.eye(n)])
        targets = np.vstack([targets, np.zeros((n, targets.shape[1]))])
    sol, _, rank, _ = np.linalg.lstsq(Rs, targets, rcond=None)
    if rank < Rs.shape[1]:
        warnings.warn(f"rank-deficient regression (rank {rank} of {Rs.shape[1]}); "
                      "returning the minimum-norm solution")
    return (sol / scale[:, None]).T
