"""Training-data collection with randomized PID excitation.

Open-loop random inputs either stall the bucket in the soil or fling it
out, so episodes are driven closed loop: horizontal and vertical speeds
are PID-controlled toward uniformly redrawn setpoints, bucket angle is
position-controlled, and uniform noise is added on top of each actuator
channel. Sampling runs at 30 Hz.
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import simulator
from .model import XI_NAMES, lift
from .simulator import SimulationDiverged

SAMPLE_HZ = 30.0
SAMPLE_DT = 1.0 / SAMPLE_HZ

CSV_HEADER = ("t," + ",".join(XI_NAMES) + ",ux,uz,uphi,s,sp")
ROW_ARITY = 20

# Default actuator limits (N, N, N*m); shared with the controller defaults.
U_MIN_DEFAULT = (-12000.0, -12000.0, -3000.0)
U_MAX_DEFAULT = (12000.0, 12000.0, 3000.0)


@dataclass(frozen=True)
class ExcitationConfig:
    """Randomized PID excitation: gains, setpoint ranges, noise, timing.

    Setpoints redraw every `hold` steps. Noise half-widths default to 15%
    of the actuator limits. The PID integrators are not reset when a
    setpoint redraws; they only clamp while the actuator saturates.
    """

    gains_force: tuple = (15000.0, 3000.0, 0.0)
    gains_torque: tuple = (600.0, 120.0, 30.0)
    vx_range: tuple = (0.05, 0.6)
    vz_range: tuple = (-0.2, 0.2)
    phi_range: tuple = (-0.6, 1.2)
    noise_x: float = 1200.0
    noise_z: float = 1200.0
    noise_phi: float = 60.0
    episode_len: int = 240
    hold: int = 30
    # Soil deeper than depth_limit traps the bucket at the default force
    # limits; the supervisor overrides the vertical setpoint to climb until
    # the cut is shallower than depth_release again. Airborne descent speed
    # is clamped so soil entry does not overshoot the depth window.
    depth_limit: float = 0.20
    depth_release: float = 0.10
    climb_speed: float = 0.25
    entry_speed: float = 0.12
    gravity_ff: bool = True     # weight feedforward on the vertical channel
    u_min: tuple = U_MIN_DEFAULT
    u_max: tuple = U_MAX_DEFAULT
    x_start_margin: float = 1.0
    x_end_margin: float = 1.0
    spawn_clearance: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("vx_range", "vz_range", "phi_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} is empty")
        if self.hold < 1:
            raise ValueError("hold must be at least 1 step")
        if self.episode_len < 1:
            raise ValueError("episode_len must be at least 1 step")


@dataclass
class Episode:
    """One logged trajectory at 30 Hz: lifted states, inputs, soil inputs."""

    t: np.ndarray
    xi: np.ndarray
    u: np.ndarray
    s: np.ndarray
    terrain_id: str = ""
    spline: object = None
    fault: bool = False

    def __len__(self):
        return self.t.shape[0]

    @property
    def dt(self):
        return SAMPLE_DT if len(self) < 2 else float(self.t[1] - self.t[0])


@dataclass
class Dataset:
    episodes: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def n_samples(self):
        return sum(len(ep) for ep in self.episodes)

    def n_pairs(self):
        return sum(max(len(ep) - 1, 0) for ep in self.episodes)

    def xi_rows(self):
        if not self.episodes:
            return np.zeros((0, len(XI_NAMES)))
        return np.vstack([ep.xi for ep in self.episodes])


class _Pid:
    """Discrete PID with integrator clamping while the output saturates.

    `scale` softens the loop per call: gains stable in soil (which damps
    the response) would make the free-flight loop unstable at 30 Hz.
    """

    def __init__(self, kp, ki, kd, lo, hi, dt):
        self.kp, self.ki, self.kd = kp, ki, kd
        self.lo, self.hi = lo, hi
        self.dt = dt
        self.integral = 0.0
        self.prev_err = None

    def update(self, err, scale=1.0):
        deriv = 0.0 if self.prev_err is None else (err - self.prev_err) / self.dt
        self.prev_err = err
        raw = scale * (self.kp * err + self.ki * (self.integral + err * self.dt)
                       + self.kd * deriv)
        if self.lo <= raw <= self.hi:
            self.integral += err * self.dt
            return raw
        return min(max(raw, self.lo), self.hi)


def pid_excite(terrain, cfg, params, spline=None, terrain_id="", x_start=None):
    """Run one excitation episode on a terrain and log it.

    `terrain` is a HeightField (a pre-fitted spline can be passed to avoid
    refitting). The bucket spawns just above the surface at x_start
    (default: the left margin). The episode ends at the step limit, on
    leaving the terrain x-range, or on a simulator fault.
    """
    from .terrain import fit_spline

    if spline is None:
        spline = fit_spline(terrain)
    rng = np.random.default_rng(cfg.seed)
    x_lo = terrain.x0 + cfg.x_start_margin
    x_hi = terrain.x_end - cfg.x_end_margin
    if x_start is None:
        x_start = x_lo
    state = simulator.spawn(spline, params, x_start, clearance=cfg.spawn_clearance)

    pids = [
        _Pid(*cfg.gains_force, cfg.u_min[0], cfg.u_max[0], SAMPLE_DT),
        _Pid(*cfg.gains_force, cfg.u_min[1], cfg.u_max[1], SAMPLE_DT),
        _Pid(*cfg.gains_torque, cfg.u_min[2], cfg.u_max[2], SAMPLE_DT),
    ]

    rows_t, rows_xi, rows_u, rows_s = [], [], [], []
    setpoints = None
    fault = False
    climbing = False
    for k in range(cfg.episode_len):
        if k % cfg.hold == 0:
            setpoints = (rng.uniform(*cfg.vx_range),
                         rng.uniform(*cfg.vz_range),
                         rng.uniform(*cfg.phi_range))
        noise = (rng.uniform(-cfg.noise_x, cfg.noise_x),
                 rng.uniform(-cfg.noise_z, cfg.noise_z),
                 rng.uniform(-cfg.noise_phi, cfg.noise_phi))

        bucket, aux, soil = simulator.measure(state, params)
        depth = soil.height - bucket.z
        if depth > cfg.depth_limit:
            climbing = True
        elif depth < cfg.depth_release:
            climbing = False
        # Depth drifts at vx*s' - vz; chasing the surface slope keeps the
        # drawn vertical setpoint meaningful as a depth rate.
        follow = soil.slope * max(aux.vx, 0.0)
        if climbing:
            vz_set = cfg.climb_speed + max(follow, 0.0)
        elif depth <= 0.0:
            # Airborne: always command a gentle re-entry.
            vz_set = min(max(setpoints[1], -cfg.entry_speed), -0.02)
        else:
            vz_set = setpoints[1] + follow
        errs = (setpoints[0] - aux.vx, vz_set - aux.vz, setpoints[2] - bucket.phi)
        # Weight feedforward keeps the vertical loop gentle in free flight;
        # full feedback gains and full force noise only once the bucket is
        # engaged (soil damping is what keeps the 30 Hz loop stable then).
        ff_z = (params.m_bucket + aux.m_soil) * params.gravity if cfg.gravity_ff else 0.0
        g = 0.15 + 0.85 * min(max(depth / 0.15, 0.0), 1.0)
        raw = (pids[0].update(errs[0], scale=g) + g * noise[0],
               pids[1].update(errs[1], scale=g) + ff_z + g * noise[1],
               pids[2].update(errs[2]) + noise[2])
        u = np.array([min(max(raw[i], cfg.u_min[i]), cfg.u_max[i])
                      for i in range(3)])

        rows_t.append(k * SAMPLE_DT)
        rows_xi.append(lift(bucket, aux))
        rows_u.append(u)
        rows_s.append(soil.as_input())

        try:
            state = simulator.advance(state, u, params, SAMPLE_DT)
        except SimulationDiverged:
            fault = True
            break
        if not (x_lo - cfg.x_start_margin * 0.5 <= state.bucket.x <= x_hi):
            break

    if not rows_t:
        return Episode(t=np.zeros(0), xi=np.zeros((0, 14)), u=np.zeros((0, 3)),
                       s=np.zeros((0, 2)), terrain_id=terrain_id, spline=spline,
                       fault=True)
    return Episode(t=np.array(rows_t), xi=np.vstack(rows_xi),
                   u=np.vstack(rows_u), s=np.vstack(rows_s),
                   terrain_id=terrain_id, spline=spline, fault=fault)


def collect(terrains, cfg, params, n_samples, base_seed=0):
    """Episodes over a cycle of terrains until n_samples rows are logged.

    Each episode gets its own child seed and a randomized spawn position,
    so the data covers the terrain x-range; episodes never share a
    generator and collection order is deterministic.
    """
    from dataclasses import replace

    episodes = []
    total = 0
    idx = 0
    while total < n_samples:
        terrain, spline, terrain_id = terrains[idx % len(terrains)]
        ep_rng = np.random.default_rng((base_seed, idx))
        x_lo = terrain.x0 + cfg.x_start_margin
        x_hi = terrain.x_end - cfg.x_end_margin
        x_start = ep_rng.uniform(x_lo, max(x_lo + 1e-6, x_hi - 1.5))
        ep_cfg = replace(cfg, seed=int(ep_rng.integers(2 ** 31)))
        ep = pid_excite(terrain, ep_cfg, params, spline=spline,
                        terrain_id=terrain_id, x_start=x_start)
        if len(ep) > 1:
            episodes.append(ep)
            total += len(ep)
        idx += 1
        if idx > 50 * max(len(terrains), 1) and total == 0:
            raise RuntimeError("excitation keeps faulting; check configuration")
    manifest = {
        "sample_hz": SAMPLE_HZ,
        "base_seed": base_seed,
        "episode_lengths": [len(ep) for ep in episodes],
        "terrain_ids": [ep.terrain_id for ep in episodes],
        "sim_config_hash": config_hash(asdict(params)),
    }
    return Dataset(episodes=episodes, manifest=manifest)


def save_dataset(dataset, path):
    """CSV of all rows plus a JSON manifest carrying episode boundaries."""
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for ep in dataset.episodes:
            for i in range(len(ep)):
                vals = [ep.t[i], *ep.xi[i], *ep.u[i], *ep.s[i]]
                fh.write(",".join(repr(float(v)) for v in vals) + "\n")
    manifest = dict(dataset.manifest)
    manifest.setdefault("sample_hz", SAMPLE_HZ)
    manifest["episode_lengths"] = [len(ep) for ep in dataset.episodes]
    manifest["terrain_ids"] = [ep.terrain_id for ep in dataset.episodes]
    with open(_manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_dataset(path):
    """Lossless inverse of save_dataset. Splines are not persisted; use
    attach_splines to restore them from terrain files."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        data = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != ROW_ARITY:
                raise ValueError(
                    f"{path}: row {lineno}, expected {ROW_ARITY} fields, got {len(parts)}")
            data.append([float(p) for p in parts])
    with open(_manifest_path(path)) as fh:
        manifest = json.load(fh)
    arr = np.array(data) if data else np.zeros((0, ROW_ARITY))
    lengths = manifest.get("episode_lengths", [arr.shape[0]] if arr.shape[0] else [])
    if sum(lengths) != arr.shape[0]:
        raise ValueError(f"{path}: manifest episode lengths do not match row count")
    terrain_ids = manifest.get("terrain_ids", [""] * len(lengths))
    episodes = []
    at = 0
    for n, tid in zip(lengths, terrain_ids):
        chunk = arr[at:at + n]
        episodes.append(Episode(t=chunk[:, 0], xi=chunk[:, 1:15],
                                u=chunk[:, 15:18], s=chunk[:, 18:20],
                                terrain_id=tid))
        at += n
    return Dataset(episodes=episodes, manifest=manifest)


def attach_splines(dataset, splines_by_id):
    for ep in dataset.episodes:
        ep.spline = splines_by_id.get(ep.terrain_id, ep.spline)
    return dataset


def config_hash(obj):
    """Stable short hash of a JSON-serializable configuration object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _manifest_path(path):
    return str(path) + ".manifest.json"
