"""Randomised-environment benchmark over planner variants (car or hovercraft).

Prints one summary line per variant and writes per-run JSON to --out.

    python scripts/run_bench.py --model car --n-env 10 --variants original reach density
"""

import argparse
import json
import time

import numpy as np

from densplan import io
from densplan.bench import BenchConfig, gen_envs, run_variant
from densplan.planner import PlannerConfig
from densplan.scenario import car_template, hovercraft_template

TEMPLATES = {"car": car_template, "hovercraft": hovercraft_template}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", choices=sorted(TEMPLATES), default="car")
    ap.add_argument("--n-env", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-mc", type=int, default=100_000)
    ap.add_argument("--variants", nargs="+",
                    default=["original", "distance(0.1)", "distance(0.2)", "distance(1.0)", "reach", "density"])
    ap.add_argument("--width", type=float, default=4.0, help="uncertainty truncation width in sigmas")
    ap.add_argument("--out", default="bench_results.json")
    args = ap.parse_args()

    suite = gen_envs(args.n_env, TEMPLATES[args.model](width=args.width), seed=args.seed)
    cfg = BenchConfig(PlannerConfig(seed=args.seed), n_mc=args.n_mc)
    out = {"model": args.model, "seed": args.seed, "width": args.width, "variants": {}}
    for v in args.variants:
        t0 = time.perf_counter()
        res = run_variant(v, suite, cfg)
        rates = [r.collision_rate for r in res.records if r.feasible]
        print(f"{v:>14s}  feasibility {res.feasibility:.2f}  safety {res.safety:.3g}  "
              f"max {max(rates) if rates else float('nan'):.3g}  ({time.perf_counter() - t0:.0f} s)", flush=True)
        out["variants"][v] = {**res.summary(), "runs": [r.to_dict() for r in res.records],
                              "runtime_s": float(np.sum(res.runtimes))}
    io.write_json(args.out, out)
    print(json.dumps({v: out["variants"][v]["feasibility"] for v in args.variants}))


if __name__ == "__main__":
    main()
