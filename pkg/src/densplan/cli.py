"""Command-line entry point: ``densplan <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 missing input artifact,
4 runtime failure.  Failures print a one-line JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import io
from .bench import gen_envs, parse_variant, run_env
from .config import load_config
from .errors import ConfigError, DensPlanError
from .learner import DataSpec, Dataset, MlpModel, ModelPredictor, build_dataset, rmse, train
from .liouville import Reference
from .planner import plan
from .probest import OraclePredictor, heatmap, mc_collision_prob, pushed_sample, total_risk
from .trajopt import solve_nlp

log = logging.getLogger("densplan")


class MissingArtifact(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _need(path, what):
    if not os.path.exists(path):
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def _override(cfg, section, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    if not kw:
        return cfg
    try:
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **kw)})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    from .config import validate

    validate(cfg)
    return cfg


class PredictorFactory:
    """Picklable predictor constructor shared with worker processes."""

    def __init__(self, model_bytes=None):
        self.model_bytes = model_bytes
        self._model = None

    def __call__(self, scenario, pcfg):
        if self.model_bytes is None:
            return OraclePredictor(scenario.loop, scenario.dt, pcfg.substeps)
        if self._model is None:
            self._model = MlpModel.from_bytes(self.model_bytes)
        return ModelPredictor(self._model)


def _factory(args):
    if args.oracle:
        return PredictorFactory()
    path = _need(args.model or os.path.join(args.out, "model.bin"), "model (train one or pass --oracle)")
    with open(path, "rb") as fh:
        return PredictorFactory(fh.read())


def _reference_controls(args, sc, seed):
    """Per-segment controls from ``--plan`` or a fresh NLP solve."""
    if args.plan:
        with open(_need(args.plan, "plan file")) as fh:
            controls = np.asarray(json.load(fh)["controls"], dtype=float)
        if controls.shape != (sc.n_segments, sc.vehicle.control_dim):
            raise ConfigError("plan controls do not match the configured scenario")
        return controls
    return solve_nlp(sc, seed=seed)[0].controls


# ----------------------------------------------------------------- dataset


def dataset_header(data):
    cols = ["traj", "split"]
    cols += [f"e0_{i}" for i in range(data.n_err)] + [f"d_{i}" for i in range(data.n_dist)]
    cols += [f"u_{i}" for i in range(data.n_uref)] + ["t"]
    cols += [f"e_{i}" for i in range(data.n_err)] + ["g"]
    return cols


def write_dataset(path, data, config_hash, seed):
    split = np.zeros(data.n_rows)
    split[data.eval_idx] = 1.0
    rows = np.column_stack([data.traj_id, split, data.inputs, data.targets])
    head = [io.provenance_line(config_hash, seed), ",".join(dataset_header(data)) + "\n"]
    body = ["%d,%d," % (r[0], r[1]) + ",".join(io.fmt(v) for v in r[2:]) + "\n" for r in rows]
    io.atomic_write(path, "".join(head + body))


def read_dataset(csv_path, manifest_path):
    with open(manifest_path) as fh:
        man = json.load(fh)
    with open(csv_path) as fh:
        fh.readline()
        header = fh.readline().strip().split(",")
        arr = np.loadtxt(fh, delimiter=",", ndmin=2)
    n_in = man["n_err"] + man["n_dist"] + man["n_uref"] + 1
    if len(header) != 2 + n_in + man["n_err"] + 1 or arr.shape[1] != len(header):
        raise ConfigError("dataset columns do not match its manifest")
    split = arr[:, 1].astype(int)
    return Dataset(arr[:, 2 : 2 + n_in], arr[:, 2 + n_in :], arr[:, 0].astype(int),
                   np.flatnonzero(split == 0), np.flatnonzero(split == 1), man["n_err"], man["n_dist"],
                   man["n_uref"], man["dt"], man["n_steps"], meta=man.get("dataset_meta", {}))


# ----------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    cfg = _override(cfg, "model", n_traj=args.n_traj)
    h, seed = cfg.digest(), args.seed
    sc = cfg.build_scenario()
    m = cfg.model
    data = build_dataset(m.n_traj, DataSpec.from_scenario(sc, n_steps=m.n_steps, substeps=m.substeps), seed,
                         m.eval_frac)
    csv_path = os.path.join(args.out, "dataset.csv")
    write_dataset(csv_path, data, h, seed)
    io.write_manifest(os.path.join(args.out, "dataset.json"), "gen-data", h, seed, [csv_path], {
        "rows": data.n_rows, "n_traj": m.n_traj, "n_steps": data.n_steps, "n_err": data.n_err,
        "n_dist": data.n_dist, "n_uref": data.n_uref, "dt": data.dt,
        "train_rows": int(len(data.train_idx)), "eval_rows": int(len(data.eval_idx)),
        "dataset_meta": data.meta,
    })
    return {"rows": data.n_rows}


def cmd_train(args, cfg):
    cfg = _override(cfg, "model", steps=args.steps)
    h, seed = cfg.digest(), args.seed
    csv_path = _need(args.data or os.path.join(args.out, "dataset.csv"), "dataset (run gen-data)")
    man_path = _need(os.path.splitext(csv_path)[0] + ".json", "dataset manifest")
    data = read_dataset(csv_path, man_path)
    res = train(data, cfg.train_config(seed))
    model_path = os.path.join(args.out, "model.bin")
    res.model.meta = {**res.model.meta, "seed": int(seed)}
    io.atomic_write(model_path, res.model.to_bytes(config_hash=h))
    state_rmse, g_rmse = rmse(res.model, data, "eval") if len(data.eval_idx) else (float("nan"),) * 2
    report = {"config_hash": h, "seed": seed, "train_loss": res.train_loss, "eval_loss": res.eval_loss,
              "eval_state_rmse": state_rmse, "eval_log_density_rmse": g_rmse, "history": res.history}
    rep_path = os.path.join(args.out, "train.json")
    io.write_json(rep_path, report)
    io.write_manifest(os.path.join(args.out, "train_manifest.json"), "train", h, seed, [model_path, rep_path])
    return {"eval_state_rmse": state_rmse, "eval_log_density_rmse": g_rmse}


def cmd_estimate(args, cfg):
    h, seed = cfg.digest(), args.seed
    sc = cfg.build_scenario()
    pcfg = cfg.planner_config(seed)
    pred = _factory(args)(sc, pcfg)
    controls = _reference_controls(args, sc, seed)
    ref = Reference.from_segments(sc.vehicle, sc.q_origin, controls, sc.seg_len, sc.dt)
    rep = total_risk(pred, ref, sc.seg_len, sc.joint_dist, sc.obstacles, pcfg.n_samples, pcfg.n_queries, seed,
                     mode=args.mode)
    body = {"config_hash": h, "seed": seed, **rep.to_dict()}
    if args.mc:
        mc = mc_collision_prob(sc.loop, ref, sc.init_error, sc.disturbance, sc.obstacles, args.mc, seed=seed,
                               substeps=cfg.bench.mc_substeps)
        body["monte_carlo"] = {"config_hash": h, "seed": seed, **mc.to_dict()}
    import jsonschema

    jsonschema.validate(io._jsonable(body), io.load_schema("risk_report.schema.json"))
    path = os.path.join(args.out, "risk_report.json")
    io.write_json(path, body)
    io.write_manifest(os.path.join(args.out, "estimate_manifest.json"), "estimate", h, seed, [path])
    return {"total_raw": rep.total_raw}


def cmd_plan(args, cfg):
    h, seed = cfg.digest(), args.seed
    sc = cfg.build_scenario()
    pcfg = cfg.planner_config(seed)
    trace = plan(sc, _factory(args)(sc, pcfg), pcfg)
    path = os.path.join(args.out, "plan.json")
    io.write_json(path, {"config_hash": h, "seed": seed, **trace.to_dict()})
    states = os.path.join(args.out, "plan_states.csv")
    st = trace.reference.states
    n = st.shape[1]
    rows = np.column_stack([np.arange(len(st)) * sc.dt, st, trace.plan.states])
    header = ["t_s"] + [f"ref_{i}" for i in range(n)] + [f"euler_{i}" for i in range(n)]
    io.atomic_write(states, io.csv_text(h, seed, header, rows))
    io.write_manifest(os.path.join(args.out, "plan_manifest.json"), "plan", h, seed, [path, states])
    return {"verdicts": trace.verdicts, "total_risk": trace.total_risk}


def _bench_task(job):
    variant, idx, sc, bcfg, factory = job
    return run_env(variant, idx, sc, bcfg, factory)


def cmd_bench(args, cfg):
    variants = tuple(v.strip() for v in args.variants.split(",")) if args.variants else None
    cfg = _override(cfg, "bench", n_env=args.n_env, n_mc=args.n_mc, variants=variants)
    h, seed = cfg.digest(), args.seed
    suite_seed = seed if args.suite_seed is None else args.suite_seed
    bcfg, gen = cfg.bench_config(seed)
    suite = gen_envs(cfg.bench.n_env, cfg.build_scenario(), suite_seed, gen)
    factory = _factory(args)
    jobs = [(v, i, sc, bcfg, factory) for v in cfg.bench.variants for i, sc in enumerate(suite.scenarios)]
    t0 = time.perf_counter()
    if args.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            records = list(pool.map(_bench_task, jobs))   # map keeps job order
    else:
        records = [_bench_task(j) for j in jobs]
    log.info("bench finished in %.1f s", time.perf_counter() - t0)
    runs = {"config_hash": h, "seed": seed, "suite_seed": suite_seed,
            "environments": [{"name": sc.name, "obstacles": [[*o.center, o.radius] for o in sc.obstacles]}
                             for sc in suite.scenarios],
            "runs": [r.to_dict() for r in records]}
    runs_path = os.path.join(args.out, "bench_runs.json")
    io.write_json(runs_path, runs)
    rows, names = [], []
    for k, v in enumerate(cfg.bench.variants):
        recs = [r for r in records if r.variant == v]
        feas = [r for r in recs if r.feasible]
        rates = [r.collision_rate for r in feas]
        safe = sum(r <= 10 * cfg.scenario.gamma for r in rates)
        names.append(v)
        rows.append([k, len(recs), len(feas) / len(recs), float(np.mean(rates)) if rates else float("nan"),
                     float(np.max(rates)) if rates else float("nan"), safe])
    lines = [io.provenance_line(h, seed), "variant,n_env,feasibility,safety,max_collision_rate,n_within_10gamma\n"]
    lines += [f"{names[r[0]]},{r[1]},{io.fmt(r[2])},{io.fmt(r[3])},{io.fmt(r[4])},{r[5]}\n" for r in rows]
    summary_path = os.path.join(args.out, "bench_summary.csv")
    io.atomic_write(summary_path, "".join(lines))
    io.write_manifest(os.path.join(args.out, "bench_manifest.json"), "bench", h, seed, [runs_path, summary_path])
    return {names[r[0]]: {"feasibility": r[2], "safety": r[3]} for r in rows}


def heatmap_csv(hm, config_hash, seed):
    out = [io.provenance_line(config_hash, seed), "origin_x,origin_y,cell,nx,ny\n",
           f"{io.fmt(hm.origin[0])},{io.fmt(hm.origin[1])},{io.fmt(hm.cell)},{hm.nx},{hm.ny}\n"]
    out += [",".join(io.fmt(v) for v in row) + "\n" for row in hm.mass]
    return "".join(out)


def read_heatmap_csv(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    h, seed = io.read_provenance(lines[0])
    ox, oy, cell, nx, ny = lines[2].split(",")
    mass = np.array([[float(v) for v in ln.split(",")] for ln in lines[3:]])
    return (float(ox), float(oy), float(cell), int(nx), int(ny)), mass, h, seed


def cmd_heatmap(args, cfg):
    h, seed = cfg.digest(), args.seed
    sc = cfg.build_scenario()
    pcfg = cfg.planner_config(seed)
    pred = _factory(args)(sc, pcfg)
    controls = _reference_controls(args, sc, seed)
    ref = Reference.from_segments(sc.vehicle, sc.q_origin, controls, sc.seg_len, sc.dt)
    sample = pushed_sample(pred, ref, sc.seg_len, sc.joint_dist, args.step, pcfg.n_samples, seed)
    hm = heatmap(sample, n_queries=args.n_queries, seed=seed, cells=args.cells)
    path = os.path.join(args.out, f"heatmap_t{args.step}.csv")
    io.atomic_write(path, heatmap_csv(hm, h, seed))
    io.write_manifest(os.path.join(args.out, "heatmap_manifest.json"), "heatmap", h, seed, [path],
                      {"step": args.step})
    return {"total_mass": hm.total}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "plan": cmd_plan,
    "bench": cmd_bench,
    "heatmap": cmd_heatmap,
}


# ------------------------------------------------------------------ parsing


def _positive(x):
    v = int(x)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _global_flags(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--threads", type=_positive, default=d(os.cpu_count() or 1))
    p.add_argument("--oracle", action="store_true", default=d(False),
                   help="use the Liouville integrator instead of a trained model")
    p.add_argument("--out", default=d("out"), help="output directory")
    p.add_argument("--model", default=d(None), help="model file (default OUT/model.bin)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser():
    parser = argparse.ArgumentParser(prog="densplan", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="simulate the training dataset")
    p.add_argument("--n-traj", type=int)
    p = sub.add_parser("train", parents=[common], help="train the surrogate model")
    p.add_argument("--data", help="dataset CSV (default OUT/dataset.csv)")
    p.add_argument("--steps", type=int)
    for name in ("estimate", "heatmap"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--plan", help="plan.json whose controls define the reference (default: NLP solution)")
        if name == "estimate":
            p.add_argument("--mode", choices=("recenter", "push"), default="recenter")
            p.add_argument("--mc", type=int, default=0, help="also run this many Monte Carlo rollouts")
        else:
            p.add_argument("--step", type=int, default=0)
            p.add_argument("--cells", type=_positive, default=40)
            p.add_argument("--n-queries", type=_positive, default=10000)
    sub.add_parser("plan", parents=[common], help="run the check / perturb / re-solve planner")
    p = sub.add_parser("bench", parents=[common], help="randomised-environment benchmark")
    p.add_argument("--n-env", type=int)
    p.add_argument("--n-mc", type=int)
    p.add_argument("--variants", help="comma-separated, e.g. original,distance(0.2),density")
    p.add_argument("--suite-seed", type=int)
    return parser


def _fail(code, exc, **extra):
    detail = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, **extra}
    print(json.dumps(detail, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "bench" and args.variants:
            for v in args.variants.split(","):
                try:
                    parse_variant(v)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from exc
        result = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(2, exc)
    except MissingArtifact as exc:
        return _fail(3, exc)
    except DensPlanError as exc:
        return _fail(4, exc, **({"segment": exc.segment} if hasattr(exc, "segment") else {}))
    except (ValueError, OSError) as exc:
        return _fail(4, exc)
    print(json.dumps(io._jsonable(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
