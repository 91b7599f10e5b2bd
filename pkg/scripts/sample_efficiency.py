"""Density estimator versus Monte Carlo risk as the sample count grows.

Runs both estimators on the rare-event scenario for each sample size and
seed, prints median and interquartile range per size, and writes the rows
(with the importance-weighted oracle) as JSON.

    python scripts/sample_efficiency.py --sizes 100 500 1000 5000 --seeds 10
"""

import argparse
import json

import numpy as np

from densplan import io
from densplan.bench import importance_oracle, sample_efficiency_study
from densplan.scenario import rare_event_scenario

CONTROLS = np.array([[2.0, 0.0]])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 500, 1000, 5000])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--n-queries", type=int, default=2000)
    ap.add_argument("--n-oracle", type=int, default=200_000)
    ap.add_argument("--out", default="sample_efficiency.json")
    args = ap.parse_args()

    sc = rare_event_scenario()
    oracle = importance_oracle(sc, CONTROLS, n=args.n_oracle)
    print(f"oracle risk {oracle.total_raw:.3g}")
    rows = sample_efficiency_study(sc, CONTROLS, args.sizes, range(args.seeds), n_queries=args.n_queries)
    for r in rows:
        d = r.to_dict()
        print(f"N={r.size:>6d}  density {d['density_median']:.3g} (iqr {d['density_iqr']:.2g})  "
              f"monte-carlo {d['mc_median']:.3g} (iqr {d['mc_iqr']:.2g})", flush=True)
    io.write_json(args.out, {"oracle_risk": oracle.total_raw, "oracle_any_collision": oracle.any_collision,
                             "rows": [r.to_dict() for r in rows]})


if __name__ == "__main__":
    main()
