"""Weighting of the contrastive term in the combined objective.

alpha scales the contrastive loss while beta stays at 0.5 so the classifier
head is always trained. alpha = 0 leaves adversarial supervised training on the
pretraining augmentations.

Run: python3 demos/05_alpha_sweep.py [--generator UE]
"""

import argparse

from poisonforge.experiments import ToySpec, craft_poison, derive_seed, run_defense, toy_split
from poisonforge.losses import LossWeights

parser = argparse.ArgumentParser()
parser.add_argument("--generator", default="UE")
parser.add_argument("--alphas", default="0,0.05,0.25,0.5,1,5")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

clean, test = toy_split(ToySpec(), args.seed)
poisoned = craft_poison(args.generator, clean, args.seed)

print(f"poison: {args.generator}")
print(f"{'alpha':>6s} {'test_acc':>8s} {'final total':>12s} {'final CE':>9s} {'final InfoNCE':>14s}")
for a in [float(x) for x in args.alphas.split(",")]:
    res, _, records = run_defense("VESPR", poisoned, test, derive_seed(args.seed, "train.VESPR"),
                                  overrides={"weights": LossWeights(alpha=a, beta=0.5)})
    last = records["train"]["epochs"][-1]
    print(f"{a:6.2f} {res['test_acc']:8.3f} {last['loss_total']:12.4f} {last['loss_ce']:9.4f} "
          f"{last['loss_contrastive']:14.4f}")
