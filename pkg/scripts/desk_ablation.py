"""Run one or more ablation suites at desk scale and print the resulting tables.

    python3 scripts/desk_ablation.py --suites stack_count --variants k1 k3 --seeds 0 1 2 --out-dir runs/desk
    python3 scripts/desk_ablation.py --suites temporal_attention dom dynamic_r shared_weights --out-dir runs/desk

Runs are cached under ``<out-dir>/runs`` by configuration, so suites that need
an identical model (the K=1 base of several suites, for instance) train it once.
"""
import argparse
import logging
import time

from recsm.ablation import SUITES, run_ablation
from recsm.presets import DESK_STEPS, EVAL_SEEDS, TRAIN_SEEDS, desk_model, desk_run_config, synthetic_samples

BASE_K = {"scales": 1, "temporal_attention": 1, "dom": 1, "dynamic_r": 3, "shared_weights": 3, "stack_count": 1}


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--suites", nargs="+", default=list(SUITES), choices=SUITES)
    ap.add_argument("--variants", nargs="+", default=None, help="restrict every listed suite to these variants")
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=DESK_STEPS)
    ap.add_argument("--out-dir", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train_samples = synthetic_samples(TRAIN_SEEDS)
    eval_samples = synthetic_samples(EVAL_SEEDS)
    train_cfg = desk_run_config(len(train_samples), args.steps)
    for suite in args.suites:
        t0 = time.time()
        table = run_ablation(suite, train_samples, eval_samples, desk_model(BASE_K[suite]), train_cfg,
                             seeds=args.seeds, out_dir=args.out_dir, variants=args.variants)
        print(f"== {suite} ({time.time() - t0:.0f}s)", flush=True)
        for r in table.rows:
            print(f"  seed {r['seed']} {r['variant']:>10}  epe {r['epe']:.3f}  d1 {r['d1_all']:.2f}%  "
                  f"{1000 * r['runtime_s']:.1f} ms  params {r['params']}", flush=True)


if __name__ == "__main__":
    main()
