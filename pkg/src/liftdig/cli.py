"""Command-line harness for the full experiment pipeline.

Subcommands: terrain | collect | train | eval | dig | sweep. Every stage
is deterministic given its seeds, writes CSV reports plus a JSON summary
carrying the configuration hash and the hashes of consumed files, and
exits nonzero with a one-line cause on failure.
"""

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datagen, mpcc, simulator, sysid, terrain as terrain_mod
from .datagen import Dataset, ExcitationConfig, config_hash
from .model import load_model, save_model
from .mpcc import MpccConfig, MpccController, run_dig, scoop_path
from .simulator import SimParams
from .sysid import InsufficientDataError

TRAIN_VARIANTS = ("dfl", "dfl_struct", "koop", "koopdfl")
DEFAULT_HORIZONS = (1, 5, 10, 20, 50)


class StageError(RuntimeError):
    """Fatal pipeline error with a one-line cause."""


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InsufficientDataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="liftdig",
        description="identify lifted linear digging models and run contouring control")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("terrain", help="generate randomized terrains")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.set_defaults(func=cmd_terrain)

    p = sub.add_parser("collect", help="collect PID-excited training data")
    p.add_argument("--terrain", action="append", default=None,
                   help="terrain CSV (repeatable)")
    p.add_argument("--terrain-dir", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=6000)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="regress lifted linear models")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variant", action="append", default=None,
                   choices=list(TRAIN_VARIANTS) + ["all"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score multi-horizon prediction error")
    p.add_argument("--model", action="append", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizons", default=",".join(map(str, DEFAULT_HORIZONS)))
    p.add_argument("--starts", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dig", help="closed-loop contouring dig runs")
    p.add_argument("--model", required=True)
    p.add_argument("--terrain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--q-theta", type=float, action="append", default=None)
    p.add_argument("--scoops", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=600)
    p.set_defaults(func=cmd_dig)

    p = sub.add_parser("sweep", help="dataset-size sweep of prediction and control error")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--sizes", default="500,3000,6000")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)
    return parser


def cmd_terrain(args):
    cfg = _load_config(args.config)
    out = _ensure_dir(args.out)
    files = []
    for i in range(args.count):
        params = terrain_mod.TerrainGenParams(
            **{**cfg.get("terrain", {}), "seed": args.seed + i})
        field = terrain_mod.random_terrain(params)
        path = out / f"terrain_{i:02d}.csv"
        terrain_mod.save_terrain(field, path, gen_params=params)
        files.append(path.name)
    _write_summary(out / "terrain_summary.json", {
        "config_hash": config_hash({"terrain": cfg.get("terrain", {}),
                                    "seed": args.seed, "count": args.count}),
        "files": files,
    })
    print(f"wrote {len(files)} terrains to {out}")
    return 0


def cmd_collect(args):
    cfg = _load_config(args.config)
    out = _ensure_dir(args.out)
    paths = _terrain_paths(args)
    terrains = []
    for tp in paths:
        field = terrain_mod.load_terrain(tp)
        terrains.append((field, terrain_mod.fit_spline(field), Path(tp).name))
    sim_params = SimParams(**cfg.get("sim", {}))
    excite = ExcitationConfig(**cfg.get("excite", {}))
    dataset = datagen.collect(terrains, excite, sim_params, args.samples,
                              base_seed=args.seed)
    dataset.manifest["terrain_files"] = [str(Path(p).resolve()) for p in paths]
    dataset.manifest["config_hash"] = config_hash(
        {"sim": asdict(sim_params), "excite": asdict(excite),
         "samples": args.samples, "seed": args.seed})
    ds_path = out / "dataset.csv"
    datagen.save_dataset(dataset, ds_path)
    print(f"collected {dataset.n_samples()} samples in "
          f"{len(dataset.episodes)} episodes -> {ds_path}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    out = _ensure_dir(args.out)
    variants = args.variant or ["dfl"]
    if "all" in variants:
        variants = list(TRAIN_VARIANTS)
    dataset = _load_dataset_with_terrains(args.dataset)
    ridge = float(cfg.get("ridge", 0.0))
    written = []
    for variant in variants:
        model = _train_variant(dataset, variant, ridge)
        model_path = out / f"model_{variant}.json"
        save_model(model, model_path)
        report = sysid.training_report(model, dataset, variant)
        report["config_hash"] = config_hash({"ridge": ridge, "variant": variant})
        report["dataset_hash"] = _file_hash(args.dataset)
        _write_summary(out / f"report_{variant}.json", report)
        written.append(model_path.name)
        print(f"trained {variant}: order {model.order}, "
              f"spectral radius {report['spectral_radius']:.4f}")
    return 0


def cmd_eval(args):
    out = _ensure_dir(args.out)
    horizons = _parse_int_list(args.horizons)
    dataset = _load_dataset_with_terrains(args.dataset)
    summary = {"models": [], "dataset_hash": _file_hash(args.dataset),
               "config_hash": config_hash({"horizons": horizons,
                                           "starts": args.starts,
                                           "seed": args.seed})}
    for model_path in args.model:
        model = load_model(model_path)
        table = sysid.eval_prediction_mse(model, dataset, horizons,
                                          n_starts=args.starts, seed=args.seed)
        variant = Path(model_path).stem.replace("model_", "")
        csv_path = out / f"mse_{variant}.csv"
        table.to_csv(csv_path)
        summary["models"].append({
            "model": str(model_path),
            "model_hash": _file_hash(model_path),
            "order": model.order,
            "csv": csv_path.name,
            "counts": {str(h): table.counts[h] for h in table.horizons},
        })
        print(f"evaluated {variant}: horizon-{table.horizons[-1]} mean MSE "
              f"{table.mean_over_variables(table.horizons[-1]):.3e}")
    _write_summary(out / "eval_summary.json", summary)
    return 0


def cmd_dig(args):
    cfg = _load_config(args.config)
    out = _ensure_dir(args.out)
    model = load_model(args.model)
    field = terrain_mod.load_terrain(args.terrain)
    sim_params = SimParams(**cfg.get("sim", {}))
    q_thetas = args.q_theta or [cfg.get("mpcc", {}).get("q_theta", 1.0)]
    dig_cfg = cfg.get("dig", {})
    summary = {"runs": [], "model_hash": _file_hash(args.model),
               "terrain_hash": _file_hash(args.terrain),
               "config_hash": config_hash({"cfg": cfg, "q_theta": q_thetas,
                                           "scoops": args.scoops})}
    for q_theta in q_thetas:
        result = run_dig_pipeline(
            model, field, sim_params, q_theta=q_theta, scoops=args.scoops,
            mpcc_overrides=cfg.get("mpcc", {}), dig_params=dig_cfg,
            max_steps=args.max_steps)
        tag = f"q{q_theta:g}".replace(".", "p")
        for c, log in enumerate(result["logs"]):
            log.to_csv(out / f"runlog_{tag}_scoop{c}.csv")
        terrain_mod.save_terrain(result["field"], out / f"terrain_final_{tag}.csv")
        summary["runs"].append({k: v for k, v in result.items()
                                if k not in ("logs", "field")} | {"q_theta": q_theta})
        print(f"dig q_theta={q_theta:g}: status={result['status']}, "
              f"path error {result['mean_path_error']:.4f} m, "
              f"time {result['completion_time']:.2f} s")
    _write_summary(out / "dig_summary.json", summary)
    return 0


def run_dig_pipeline(model, field, sim_params, q_theta=1.0, scoops=1,
                     mpcc_overrides=None, dig_params=None, max_steps=600,
                     dt=datagen.SAMPLE_DT):
    """Run one or more dig cycles with a shared path; excavate between cycles.

    Returns a dict with per-cycle logs, the final height field, tracking
    metrics and remaining-volume history (for multi-scoop trenching).
    """
    dig_params = dict(dig_params or {})
    x_entry = float(dig_params.get("x_entry", field.x0 + 1.5))
    length = float(dig_params.get("length", 3.0))
    depth = float(dig_params.get("depth", 0.15))
    clearance = float(dig_params.get("clearance", 0.0))

    overrides = dict(mpcc_overrides or {})
    overrides["q_theta"] = q_theta
    cfg = _mpcc_config(overrides)

    spline0 = terrain_mod.fit_spline(field)
    path, _ = scoop_path(spline0, x_entry, length=length, depth=depth)
    prof_x = field.x
    prof_z = mpcc.desired_profile(path, prof_x)
    span = (prof_x >= x_entry) & (prof_x <= x_entry + length)

    logs = []
    volumes = [_volume_above(field, prof_z, span)]
    status = "incomplete"
    total_steps = 0
    for _ in range(scoops):
        spline = terrain_mod.fit_spline(field)
        state = simulator.spawn(spline, sim_params, x_entry, clearance=clearance)
        controller = MpccController(model, path, spline, cfg)
        log, _ = run_dig(state, sim_params, controller, max_steps=max_steps, dt=dt)
        logs.append(log)
        total_steps += len(log.t)
        status = log.status
        field = terrain_mod.excavate(field, log.tip_path)
        volumes.append(_volume_above(field, prof_z, span))

    first = logs[0]
    return {
        "logs": logs,
        "field": field,
        "status": status,
        "mean_path_error": first.mean_path_error(path),
        "completion_time": len(first.t) * dt,
        "steps": total_steps,
        "volumes": volumes,
        "min_vx": float(np.min([v for log in logs for v in log.vx]))
        if any(len(l.vx) for l in logs) else float("nan"),
    }


def cmd_sweep(args):
    cfg = _load_config(args.config)
    out = _ensure_dir(args.out)
    sizes = _parse_int_list(args.sizes)
    rows = run_size_sweep(sizes, n_seeds=args.seeds, base_seed=args.seed,
                          cfg=cfg)
    chash = config_hash({"sizes": sizes, "seeds": args.seeds,
                         "seed": args.seed, "cfg": cfg})
    with open(out / "sweep.csv", "w") as fh:
        fh.write("size,seed,mse_h20,path_error,status,config_hash\n")
        for r in rows:
            fh.write(f"{r['size']},{r['seed']},{r['mse_h20']!r},"
                     f"{r['path_error']!r},{r['status']},{chash}\n")
    _write_summary(out / "sweep_summary.json", {"rows": rows, "config_hash": chash})
    for r in rows:
        print(f"size {r['size']} seed {r['seed']}: mse_h20 {r['mse_h20']:.3e}, "
              f"path error {r['path_error']:.4f}")
    return 0


def run_size_sweep(sizes, n_seeds=3, base_seed=0, cfg=None, horizon=20,
                   eval_starts=50, max_steps=600):
    """Prediction and closed-loop error as a function of training size.

    Per seed: one terrain, one pooled collection at the largest size plus a
    held-out test set, then per size train on the first `size` samples and
    score horizon-`horizon` MSE and the closed-loop path error of a dig.
    """
    cfg = cfg or {}
    sim_params = SimParams(**cfg.get("sim", {}))
    excite = ExcitationConfig(**cfg.get("excite", {}))
    sizes = sorted(sizes)
    rows = []
    for si in range(n_seeds):
        seed = base_seed + si
        tparams = terrain_mod.TerrainGenParams(**{**cfg.get("terrain", {}),
                                                  "seed": 1000 + seed})
        field = terrain_mod.random_terrain(tparams)
        spline = terrain_mod.fit_spline(field)
        terrains = [(field, spline, f"terrain_{seed}")]
        train_all = datagen.collect(terrains, excite, sim_params,
                                    max(sizes), base_seed=seed)
        test = datagen.collect(terrains, excite, sim_params,
                               max(1000, max(sizes) // 4),
                               base_seed=10000 + seed)
        for size in sizes:
            subset = _truncate_dataset(train_all, size)
            model = sysid.regress_lifted(subset, "dfl")
            table = sysid.eval_prediction_mse(model, test, [horizon],
                                              n_starts=eval_starts, seed=seed)
            result = run_dig_pipeline(model, field, sim_params,
                                      q_theta=cfg.get("mpcc", {}).get("q_theta", 1.0),
                                      mpcc_overrides=cfg.get("mpcc", {}),
                                      dig_params=cfg.get("dig", {}),
                                      max_steps=max_steps)
            rows.append({
                "size": size,
                "seed": seed,
                "mse_h20": table.mean_over_variables(horizon),
                "path_error": result["mean_path_error"],
                "status": result["status"],
            })
    return rows


def _train_variant(dataset, variant, ridge):
    if variant == "dfl_struct":
        cmodel = sysid.dfl_structured_fit(dataset, ridge=ridge)
        bounds = sysid.compute_bounds(dataset)
        from .model import discretize
        return discretize(cmodel, dataset.episodes[0].dt, bounds=bounds)
    lifting = {"dfl": "dfl", "koop": "koop", "koopdfl": "koopdfl"}[variant]
    return sysid.regress_lifted(dataset, lifting, ridge=ridge)


def _truncate_dataset(dataset, n_samples):
    episodes = []
    total = 0
    for ep in dataset.episodes:
        if total >= n_samples:
            break
        take = min(len(ep), n_samples - total)
        if take >= 2:
            episodes.append(datagen.Episode(
                t=ep.t[:take], xi=ep.xi[:take], u=ep.u[:take], s=ep.s[:take],
                terrain_id=ep.terrain_id, spline=ep.spline))
        total += take
    return Dataset(episodes=episodes, manifest=dict(dataset.manifest))


def _mpcc_config(overrides):
    kwargs = dict(overrides)
    for key in ("Q", "R"):
        if key in kwargs:
            kwargs[key] = np.asarray(kwargs[key], dtype=float)
    return MpccConfig(**kwargs)


def _volume_above(field, prof_z, span):
    excess = np.maximum(np.asarray(field.h) - prof_z, 0.0)
    return float(np.sum(excess[span]) * field.dx)


def _terrain_paths(args):
    paths = list(args.terrain or [])
    if args.terrain_dir:
        paths.extend(sorted(str(p) for p in Path(args.terrain_dir).glob("terrain_*.csv")))
    if not paths:
        raise StageError("no terrain files given (use --terrain or --terrain-dir)")
    for p in paths:
        if not Path(p).exists():
            raise StageError(f"missing terrain file: {p}")
    return paths


def _load_dataset_with_terrains(path):
    if not Path(path).exists():
        raise StageError(f"missing dataset file: {path}")
    dataset = datagen.load_dataset(path)
    files = dataset.manifest.get("terrain_files", [])
    by_id = {}
    for f in files:
        fp = Path(f)
        if not fp.exists():
            fp = Path(path).parent / fp.name
        if not fp.exists():
            raise StageError(f"missing terrain file referenced by manifest: {f}")
        field = terrain_mod.load_terrain(fp)
        by_id[fp.name] = terrain_mod.fit_spline(field)
    datagen.attach_splines(dataset, by_id)
    return dataset


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise StageError(f"missing config file: {path}")
    with open(p) as fh:
        return json.load(fh)


def _parse_int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v != ""]
    except ValueError as exc:
        raise StageError(f"bad integer list {text!r}") from exc


def _ensure_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_summary(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, default=float)
        fh.write("\n")


if __name__ == "__main__":
    sys.exit(main())
