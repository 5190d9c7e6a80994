"""Worst-case and average distortion of complete binary trees: constructive hyperbolic vs stress-fitted Euclidean.

    python scripts/tree_benchmark.py --depths 1 2 3 4 5 6 7 --out results/tree
"""

import argparse
from pathlib import Path

from geotkg.diagnostics import tree_distortion_bench, write_bench_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depths", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6, 7])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/tree")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = tree_distortion_bench(args.depths, dim=2, seed=args.seed)
    write_bench_csv(rows, out / "bench.csv")
    print(f"{'depth':>5} {'nodes':>6} {'hyperbolic':>11} {'euclidean':>10}")
    by = {(r.depth, r.geometry): r for r in rows}
    for k in args.depths:
        h, e = by[(k, "hyperbolic")], by[(k, "euclidean")]
        print(f"{k:>5} {h.n_nodes:>6} {h.worst:>11.3f} {e.worst:>10.3f}")


if __name__ == "__main__":
    main()
