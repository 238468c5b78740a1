"""Craft every poison on the toy set and look at what each one does to the images.

Run: python3 demos/01_poison_gallery.py [--out gallery.png]
"""

import argparse

import numpy as np
from PIL import Image

from poisonforge.experiments import ToySpec, craft_poison, toy_split
from poisonforge.poisons import verify_budget

GENERATORS = ["AP", "UE", "RUE", "CP", "LSP", "OPS", "CUDA"]

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="gallery.png")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

clean, _ = toy_split(ToySpec(), args.seed)
print(f"clean toy set: {len(clean)} images of shape {clean.image_shape}, {clean.num_classes} classes")

# One row per generator: the first image of each class, then the same images
# with the perturbation magnified so it is visible at all.
rows = []
for name in GENERATORS:
    ds = craft_poison(name, clean, args.seed)
    report = verify_budget(ds)
    delta = ds.poisoned.pixels.astype(np.float64) - ds.clean.pixels
    linf = np.abs(delta).reshape(len(ds), -1).max(axis=1)
    changed = (np.abs(delta).sum(axis=1) > 0).reshape(len(ds), -1).sum(axis=1)
    verdict = {True: "pass", False: "FAIL", None: "n/a (non-additive)"}[report.passed]
    print(f"{name:5s} budget={ds.budget.norm.value}:{ds.budget.epsilon:.4g}  max Linf={linf.max():.4f}  "
          f"mean changed pixels={changed.mean():6.1f}  verify_budget={verdict}")

    firsts = [int(np.flatnonzero(clean.labels == k)[0]) for k in range(clean.num_classes)]
    poisoned = [ds.poisoned.pixels[i] for i in firsts]
    magnified = [np.clip(0.5 + 8 * delta[i], 0, 1) for i in firsts]
    rows.append(np.concatenate(poisoned + magnified, axis=2))

grid = np.concatenate(rows, axis=1).transpose(1, 2, 0)
img = Image.fromarray((grid * 255).round().astype(np.uint8)).resize((grid.shape[1] * 4, grid.shape[0] * 4),
                                                                   Image.NEAREST)
img.save(args.out)
print(f"wrote {args.out}: rows are {', '.join(GENERATORS)}; left half poisoned, right half 8x perturbation")
