"""Representation geometry of different defenses on the same poison.

For each defense the four metrics are computed on the poisoned training set:
same-class similarity, poison/clean similarity, effective rank and local
Lipschitz roughness.

Run: python3 demos/04_representation_geometry.py [--generator UE]
"""

import argparse

from poisonforge.analysis import analysis_report
from poisonforge.experiments import ToySpec, craft_poison, derive_seed, run_defense, toy_split

parser = argparse.ArgumentParser()
parser.add_argument("--generator", default="UE")
parser.add_argument("--methods", default="SL,SSL,SSL_SL,VESPR")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

clean, test = toy_split(ToySpec(), args.seed)
poisoned = craft_poison(args.generator, clean, args.seed)

print(f"poison: {args.generator}")
print(f"{'defense':10s} {'test_acc':>8s} {'in_cls':>8s} {'psn_cln':>8s} {'e_rank':>8s} {'local_lip':>10s}")
for m in args.methods.split(","):
    res, bundle, _ = run_defense(m, poisoned, test, derive_seed(args.seed, f"train.{m}"))
    r = analysis_report(bundle, poisoned, lip_samples=64, seed=derive_seed(args.seed, "analysis"))
    print(f"{m:10s} {res['test_acc']:8.3f} {r['in_cls_sim_psn']:8.3f} {r['psn_cln_sim']:8.3f} "
          f"{r['e_rank_psn']:8.2f} {r['local_lip_psn']:10.1f}")

# A defense that ignores the shortcut keeps poisoned images close to their
# clean versions (high psn_cln); adversarial training smooths the encoder
# (low local_lip).
