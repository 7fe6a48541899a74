"""Train PCQL and plain CQL on several seeds and tabulate the evaluation metrics.

    python3 scripts/compare_variants.py --seeds 0 1 2 --epochs 50 --out runs/compare.csv
"""

from __future__ import annotations

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from pcql.algorithms import TrainConfig, save_agent, train_pcql
from pcql.core import FEATURE_INDEX
from pcql.data import ingest
from pcql.evaluation import fqe_evaluate, mape, pearson, recommended_doses
from pcql.simenv import GenerateConfig, generate_surgeries

COLUMNS = ("variant", "seed", "epochs", "train_seconds", "fqe", "mape_pct", "mape_pct_dose_gt_0.5", "mean_dose", "pearson_dose_map")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--n-surgeries", type=int, default=200)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--width", type=int, default=64, help="hidden width of every network")
    p.add_argument("--phi-weight", type=float, default=1.0)
    p.add_argument("--out", default="runs/compare.csv")
    p.add_argument("--save-checkpoints", action="store_true")
    args = p.parse_args(argv)

    res = ingest(generate_surgeries(GenerateConfig(n_surgeries=args.n_surgeries, seed=args.data_seed)), seed=0, p_max=12.0)
    test = res.test
    logged = recommended_doses(None, test)
    maps = test.arrays().states[:, FEATURE_INDEX["map"]]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "variant": "behavior", "seed": "", "epochs": "", "train_seconds": "",
            "fqe": fqe_evaluate(None, test).estimate, "mape_pct": 0.0, "mape_pct_dose_gt_0.5": 0.0,
            "mean_dose": float(logged.mean()), "pearson_dose_map": pearson(logged, maps),
        }
    ]
    print(rows[0], flush=True)
    big = logged > 0.5
    for seed in args.seeds:
        for variant in ("pcql", "cql"):
            extra = dict(phi_weight=args.phi_weight) if variant == "pcql" else dict(phi_weight=0.0, update_constraint_nets=False)
            cfg = TrainConfig(epochs=args.epochs, seed=seed, hidden=(args.width,) * 2, constraint_hidden=(args.width,) * 2, **extra)
            t0 = time.perf_counter()
            agent, _ = train_pcql(res.train, res.valid, cfg)
            seconds = time.perf_counter() - t0
            if args.save_checkpoints:
                save_agent(out.parent / f"{variant}_{seed}.ckpt", agent)
            rec = recommended_doses(agent.policy, test)
            rows.append(
                {
                    "variant": variant, "seed": seed, "epochs": args.epochs, "train_seconds": round(seconds, 1),
                    "fqe": fqe_evaluate(agent.policy, test).estimate,
                    "mape_pct": mape(rec, logged), "mape_pct_dose_gt_0.5": mape(rec[big], logged[big]),
                    "mean_dose": float(rec.mean()), "pearson_dose_map": pearson(rec, maps),
                }
            )
            print(rows[-1], flush=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
