"""Jensen gap of mini-batch training against the full-batch optimum.

Sweeps batch size at |G| = 7 and group count at B = 32 and prints the
median gap per strategy. The full grid with three seeds takes about two
minutes on one core.

    python demos/gap_sweep.py [--seeds 1] [--csv out.csv]
"""
import argparse
import logging
import os

from fairdual.sim import SimConfig, median_gaps, run_gap_sweep, write_sweep_csv

STRATEGIES = ("uni", "fairdual", "dro", "sdro", "ifairlrs")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--csv")
    ap.add_argument("-v", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.v else logging.WARNING)

    points = tuple((B, 7) for B in (8, 16, 32, 64, 128)) + tuple(
        (32, G) for G in (3, 5, 9, 11))
    cfg = SimConfig(points=points, strategies=STRATEGIES, num_seeds=args.seeds)
    rows = run_gap_sweep(cfg, jobs=os.cpu_count() or 1)
    if args.csv:
        write_sweep_csv(rows, args.csv)
    med = median_gaps(rows)

    print("gap x 1e6 (median over seeds)")
    print(f"{'B':>4} {'G':>3} " + " ".join(f"{s:>9}" for s in STRATEGIES))
    for B, G in sorted(points, key=lambda p: (p[1] != 7, p[1], p[0])):
        print(f"{B:>4} {G:>3} " + " ".join(f"{med[(B, G, s)] * 1e6:9.3g}" for s in STRATEGIES))


if __name__ == "__main__":
    main()
