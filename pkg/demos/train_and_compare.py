"""Train UNI and FairDual on the same synthetic split and compare metrics.

    python demos/train_and_compare.py [--epochs 5] [--lambda 10]
"""
import argparse

from fairdual.trainer import load_dataset, preset_config, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--lambda", dest="lam", type=float, default=10.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    base = preset_config("lambda-study", epochs=args.epochs, lam=args.lam, seed=args.seed,
                     synthetic_seed=args.seed, eval_every=args.epochs)
    split, catalog, _ = load_dataset(base)
    print(f"{split.num_users} users, {split.num_items} items, {len(catalog.m)} groups, "
          f"group sizes {catalog.m.astype(int).tolist()}")

    for strategy in ("uni", "fairdual"):
        result = train(base.replace(strategy=strategy), split, catalog)
        report = result.history[-1][1]
        cells = "  ".join(f"{name}@{k}={getattr(report, name)[k]:.4f}"
                          for name in ("ndcg", "mmf") for k in report.ks)
        print(f"{strategy:9s} {cells}")
        if result.dual is not None:
            print(f"{'':9s} final mu {result.dual.mu.round(4).tolist()}")


if __name__ == "__main__":
    main()
