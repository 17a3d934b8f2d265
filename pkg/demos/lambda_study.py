"""MMF@10 as the fairness strength lambda grows.

Uses the "lambda-study" preset (symmetric log-loss, no group popularity
offsets) so that the dual weights are the only source of group preference.

    python demos/lambda_study.py [--seeds 0,1,2]
"""
import argparse

import numpy as np

from fairdual.trainer import load_dataset, preset_config, train

LAMBDAS = (0.0, 0.5, 2.0, 5.0, 10.0)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args()

    curves = []
    for seed in map(int, args.seeds.split(",")):
        base = preset_config("lambda-study", epochs=args.epochs, seed=seed,
                             synthetic_seed=seed, eval_every=args.epochs)
        split, catalog, _ = load_dataset(base)
        row = []
        for lam in LAMBDAS:
            report = train(base.replace(lam=lam), split, catalog).history[-1][1]
            row.append((report.mmf[10], report.ndcg[10]))
            print(f"seed {seed} lambda {lam:5.1f}  MMF@10 {row[-1][0]:.4f}  "
                  f"NDCG@10 {row[-1][1]:.4f}", flush=True)
        curves.append(row)
    med = np.median(np.array(curves), axis=0)
    print("\nmedian over seeds")
    for lam, (mmf, ndcg) in zip(LAMBDAS, med):
        print(f"lambda {lam:5.1f}  MMF@10 {mmf:.4f}  NDCG@10 {ndcg:.4f}")


if __name__ == "__main__":
    main()
