"""Density heatmaps of the pushed uncertainty along a planned trajectory.

Plans the configured scenario with the Liouville oracle and writes one
heatmap CSV per requested step (the layout matches ``densplan heatmap``).

    python scripts/heatmaps.py --config configs/demo_car.json --steps 0 40 80 120 160 200
"""

import argparse
import os

from densplan import io
from densplan.cli import heatmap_csv
from densplan.config import load_config
from densplan.planner import default_predictor, plan
from densplan.probest import heatmap, pushed_sample


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, nargs="+", default=[0, 40, 80, 120, 160, 200])
    ap.add_argument("--cells", type=int, default=40)
    ap.add_argument("--out", default="heatmaps")
    args = ap.parse_args()

    cfg = load_config(args.config)
    sc, pcfg = cfg.build_scenario(), cfg.planner_config(args.seed)
    pred = default_predictor(sc, pcfg)
    trace = plan(sc, pred, pcfg)
    print("verdicts", trace.verdicts, "total risk", f"{trace.total_risk:.3g}")
    os.makedirs(args.out, exist_ok=True)
    for step in args.steps:
        sample = pushed_sample(pred, trace.reference, sc.seg_len, sc.joint_dist, step, pcfg.n_samples, args.seed)
        hm = heatmap(sample, seed=args.seed, cells=args.cells)
        path = os.path.join(args.out, f"heatmap_t{step}.csv")
        io.atomic_write(path, heatmap_csv(hm, cfg.digest(), args.seed))
        print(f"step {step}: {path}")


if __name__ == "__main__":
    main()
