"""Solver cost against the number of players (dense KKT solve and full Newton solve)."""

import argparse
import csv
import sys

from psngame.harness import kkt_scaling, loglog_slope


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--agents", default="2,4,8,16", help="comma list of agent counts")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="optional output file")
    args = ap.parse_args()

    rows = kkt_scaling([int(a) for a in args.agents.split(",")], args.repeats, args.seed)
    print(f"{'N':>4} {'vars':>6} {'kkt':>6} {'kkt solve [s]':>14} {'full solve [s]':>15}")
    for r in rows:
        print(f"{r['agents']:>4} {r['variables']:>6} {r['kkt_size']:>6} {r['kkt_solve']:>14.5f} {r['full_solve']:>15.4f}")
    v = [r["variables"] for r in rows]
    print(f"log-log slope, dense KKT solve: {loglog_slope(v, [r['kkt_solve'] for r in rows]):.2f}")
    print(f"log-log slope, full solve:      {loglog_slope(v, [r['full_solve'] for r in rows]):.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    sys.exit(main())
