"""A small poison x defense table with Psn Min and Psn Avg rows.

Run: python3 demos/03_defense_bench.py [--generators AP,UE,LSP] [--methods SL,SSL,VESPR]

The full seven-poison grid takes several minutes on one CPU; the same table is
produced (resumably, with per-cell files) by ``poisonforge bench``.
"""

import argparse
import math
import time

from poisonforge.experiments import bench_grid, summarize

parser = argparse.ArgumentParser()
parser.add_argument("--generators", default="AP,UE,LSP")
parser.add_argument("--methods", default="SL,SSL,VESPR")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

generators = args.generators.split(",")
methods = args.methods.split(",")
start = time.time()


def progress(_, cell):
    print(f"  [{time.time() - start:6.1f}s] {cell['poison']:5s} x {cell['defense']:10s} "
          f"test_acc={cell['test_acc']:.3f}", flush=True)


cells = bench_grid(generators, methods, seed=args.seed, include_clean=True, on_cell=progress)
by = {(c["poison"], c["defense"]): c["test_acc"] for c in cells}
summary = summarize(cells, methods)


def fmt(v):
    return "  nan " if math.isnan(v) else f"{100 * v:6.1f}"


print("\nclean-test accuracy (%)")
print("poison   " + "".join(f"{m:>12s}" for m in methods))
for p in ["Clean"] + generators:
    print(f"{p:8s} " + "".join(f"{fmt(by[(p, m)]):>12s}" for m in methods))
print("-" * (9 + 12 * len(methods)))
print("Psn Min  " + "".join(f"{fmt(summary[m]['psn_min']):>12s}" for m in methods))
print("Psn Avg  " + "".join(f"{fmt(summary[m]['psn_avg']):>12s}" for m in methods))
