"""Availability-poison generators.

Additive sample-wise poisons (AP, UE, RUE, CP) are optimized against a
surrogate model; class-wise poisons (LSP, OPS, CUDA) are heuristic. Every
generator returns a :class:`PoisonedDataset` whose ``generator_config`` holds
the resolved parameters and crafting provenance (patterns, kernels, pixel
choices, loop status).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as aug
from .adversary import Guide, PGDConfig, pgd_attack
from .data import ImageBatch, Norm, PerturbationBudget, PoisonedDataset, perturbation_distances
from .errors import GeneratorQualityError
from .losses import contrastive_accuracy, cross_entropy, info_nce
from .model import build_bundle
from .trainer import default_config, evaluate, train

__all__ = [
    "Generator",
    "GeneratorConfig",
    "BudgetReport",
    "craft",
    "craft_ap",
    "craft_ue",
    "craft_rue",
    "craft_cp",
    "craft_lsp",
    "craft_ops",
    "craft_cuda",
    "verify_budget",
    "DEFAULT_PARAMS",
]

log = logging.getLogger(__name__)


class Generator(str, enum.Enum):
    AP = "AP"
    UE = "UE"
    RUE = "RUE"
    CP = "CP"
    LSP = "LSP"
    OPS = "OPS"
    CUDA = "CUDA"


DEFAULT_BUDGETS = {
    Generator.AP: PerturbationBudget(Norm.LINF, 8 / 255),
    Generator.UE: PerturbationBudget(Norm.LINF, 8 / 255),
    Generator.RUE: PerturbationBudget(Norm.LINF, 8 / 255),
    Generator.CP: PerturbationBudget(Norm.LINF, 8 / 255),
    Generator.LSP: PerturbationBudget(Norm.LINF, 16 / 255),
    Generator.OPS: PerturbationBudget(Norm.L0, 1.0),
    Generator.CUDA: PerturbationBudget(Norm.UNBOUNDED, 0.0),
}

_MINMIN = {
    "surrogate_steps": 20,
    "delta_steps": 10,
    "step_fraction": 0.1,
    "stop_acc": 0.99,
    "max_rounds": 30,
    "batch_size": 32,
    "lr": 0.1,
}

DEFAULT_PARAMS = {
    Generator.AP: {"surrogate_epochs": 15, "min_surrogate_acc": 0.9, "attack_steps": 40, "step_fraction": 0.125,
                   "targeted": True},
    Generator.UE: dict(_MINMIN),
    Generator.RUE: {**_MINMIN, "inner_radius": 2 / 255, "inner_steps": 3},
    Generator.CP: {**_MINMIN, "max_rounds": 10, "lr": 0.2, "temperature": 0.2},
    Generator.LSP: {"block_size": None},
    Generator.OPS: {},
    Generator.CUDA: {"kernel_size": 3, "noise": 0.5},
}


@dataclass(frozen=True)
class GeneratorConfig:
    generator: Generator
    budget: PerturbationBudget | None = None
    surrogate_arch: str = "TinyConvNet"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        g = Generator(self.generator)
        object.__setattr__(self, "generator", g)
        budget = self.budget or DEFAULT_BUDGETS[g]
        object.__setattr__(self, "budget", budget)
        unknown = set(self.params) - set(DEFAULT_PARAMS[g])
        if unknown:
            raise ValueError(f"unknown {g.value} parameter(s): {sorted(unknown)}")
        if g == Generator.CUDA:
            if budget.norm != Norm.UNBOUNDED:
                raise ValueError("CUDA is non-additive and needs an Unbounded budget")
        elif g == Generator.OPS:
            if budget.norm != Norm.L0 or budget.epsilon != 1:
                raise ValueError("OPS needs an L0 budget of one pixel")
        elif budget.norm != Norm.LINF:
            raise ValueError(f"{g.value} is an additive L-inf generator")

    def resolved(self) -> dict:
        return {**DEFAULT_PARAMS[self.generator], **self.params}

    def provenance(self, **extra) -> dict:
        return {
            "generator": self.generator.value,
            "budget": self.budget.to_dict(),
            "surrogate_arch": self.surrogate_arch,
            "seed": self.seed,
            "params": self.resolved(),
            **extra,
        }


def _pack(clean: ImageBatch, poisoned: np.ndarray, cfg: GeneratorConfig, **prov) -> PoisonedDataset:
    return PoisonedDataset(clean, clean.with_pixels(poisoned), cfg.budget, cfg.generator.value, cfg.provenance(**prov))


def _tensor(batch):
    return torch.from_numpy(np.array(batch.pixels, dtype=np.float32))


def _to_pixels(x, delta, eps):
    """x + delta in [0, 1] as float32 with the float32 L-inf budget intact."""
    x32 = x.numpy()
    x64 = x32.astype(np.float64)
    out = np.clip(x64 + np.clip(delta.numpy().astype(np.float64), -eps, eps), 0.0, 1.0).astype(np.float32)
    # float32 rounding may push |out - x| a hair over eps; nudge those pixels one ulp toward x
    while True:
        over = np.abs(out.astype(np.float64) - x64) > eps
        if not over.any():
            return out
        out[over] = np.nextafter(out[over], x32[over])


def _surrogate(clean, cfg, with_projector=False):
    return build_bundle(cfg.surrogate_arch, clean.image_shape, 64, 64, clean.num_classes, 3 if with_projector else 1,
                        False, cfg.seed)


# --------------------------------------------------------------------------
# AP


def craft_ap(clean: ImageBatch, cfg: GeneratorConfig) -> PoisonedDataset:
    """Adversarial poisoning: targeted PGD toward class y + 1 (mod K) against a
    surrogate trained on clean data. Labels stay the true labels."""
    p = cfg.resolved()
    eps = cfg.budget.epsilon
    if eps == 0:
        return _pack(clean, np.array(clean.pixels), cfg, surrogate_acc=None)
    sur_cfg = default_config("SL", epochs=p["surrogate_epochs"], seed=cfg.seed, arch=cfg.surrogate_arch)
    bundle, _ = train(sur_cfg, clean, record_steps=False)
    acc = evaluate(bundle, clean)["accuracy"]
    if acc < p["min_surrogate_acc"]:
        raise GeneratorQualityError(f"AP surrogate reached {acc:.3f} clean train accuracy (< {p['min_surrogate_acc']})")
    x = _tensor(clean)
    y = torch.from_numpy(np.array(clean.labels))
    pgd = PGDConfig(eps, eps * p["step_fraction"], p["attack_steps"], random_start=False, guide=Guide.CE)
    if p["targeted"]:
        delta = pgd_attack(bundle, x, pgd, labels=(y + 1) % clean.num_classes, maximize=False)
    else:
        delta = pgd_attack(bundle, x, pgd, labels=y, maximize=True)
    return _pack(clean, _to_pixels(x, delta, eps), cfg, surrogate_acc=acc)


# --------------------------------------------------------------------------
# min-min family (UE, RUE, CP)


def _sgd(bundle, lr, params=None):
    return torch.optim.SGD(params if params is not None else bundle.parameters(), lr=lr, momentum=0.9, weight_decay=5e-4)


def _minmin_supervised(clean, cfg, robust):
    p = cfg.resolved()
    eps = cfg.budget.epsilon
    x = _tensor(clean)
    y = torch.from_numpy(np.array(clean.labels))
    n = x.shape[0]
    delta = torch.zeros_like(x)
    if eps == 0:
        return _pack(clean, np.array(clean.pixels), cfg, rounds=0, converged=True, final_acc=None)
    bundle = _surrogate(clean, cfg)
    params = list(bundle.encoder.parameters()) + list(bundle.classifier.parameters())
    opt = _sgd(bundle, p["lr"], params)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    step = eps * p["step_fraction"]
    inner = PGDConfig(p.get("inner_radius", 0.0), p.get("inner_radius", 0.0) / 2, p.get("inner_steps", 0),
                      random_start=True, guide=Guide.CE)

    def poisoned():
        return (x + delta).clamp(0, 1)

    converged, acc, rounds = False, 0.0, 0
    for rounds in range(1, p["max_rounds"] + 1):
        for _ in range(p["surrogate_steps"]):
            idx = torch.from_numpy(rng.choice(n, size=min(p["batch_size"], n), replace=False))
            bundle.train()
            loss = cross_entropy(bundle.classifier(bundle.encoder(poisoned()[idx])), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            bundle.eval()
        for start in range(0, n, p["batch_size"]):
            sl = slice(start, start + p["batch_size"])
            xb, yb, db = x[sl], y[sl], delta[sl].clone()
            for _ in range(p["delta_steps"]):
                xp = (xb + db).clamp(0, 1)
                rho = pgd_attack(bundle, xp, inner, labels=yb, generator=gen) if robust else 0.0
                db.requires_grad_(True)
                loss = cross_entropy(bundle.classifier(bundle.encoder((xb + db).clamp(0, 1) + rho)), yb)
                (g,) = torch.autograd.grad(loss, db)
                db = (db.detach() - step * g.sign()).clamp(-eps, eps)
                db = (xb + db).clamp(0, 1) - xb
            delta[sl] = db.detach()
        acc = evaluate(bundle, clean.with_pixels(_to_pixels(x, delta, eps)))["accuracy"]
        if acc >= p["stop_acc"]:
            converged = True
            break
    if not converged:
        log.warning("%s did not reach stop_acc=%.2f after %d rounds (acc=%.3f)", cfg.generator.value, p["stop_acc"], rounds, acc)
    return _pack(clean, _to_pixels(x, delta, eps), cfg, rounds=rounds, converged=converged, final_acc=acc)


def craft_ue(clean: ImageBatch, cfg: GeneratorConfig) -> PoisonedDataset:
    """Unlearnable examples: sample-wise error-minimizing noise (min-min)."""
    return _minmin_supervised(clean, cfg, robust=False)


def craft_rue(clean: ImageBatch, cfg: GeneratorConfig) -> PoisonedDataset:
    """Robust unlearnable examples: error-minimizing noise evaluated at an
    inner adversarial point, min_delta max_rho CE(x + delta + rho)."""
    return _minmin_supervised(clean, cfg, robust=True)


def craft_cp(clean: ImageBatch, cfg: GeneratorConfig) -> PoisonedDataset:
    """Contrastive poisoning: sample-wise noise minimizing the InfoNCE loss of
    a SimCLR surrogate. Both views are augmentations of the same x + delta and
    gradients flow through the augmentation."""
    p = cfg.resolved()
    eps = cfg.budget.epsilon
    x = _tensor(clean)
    n = x.shape[0]
    if eps == 0:
        return _pack(clean, np.array(clean.pixels), cfg, rounds=0, converged=True, final_acc=None)
    bundle = _surrogate(clean, cfg, with_projector=True)
    params = list(bundle.encoder.parameters()) + list(bundle.projector.parameters())
    opt = _sgd(bundle, p["lr"], params)
    policy = aug.pretrain_policy(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    ids = clean.ids
    delta = torch.zeros_like(x)
    step = eps * p["step_fraction"]
    bs = max(2, p["batch_size"])
    key = 0

    def views(xb, bids):
        nonlocal key
        key += 1
        return aug.augment_tensor(policy, xb, bids, key, 0), aug.augment_tensor(policy, xb, bids, key, 1)

    converged, acc, rounds = False, 0.0, 0
    for rounds in range(1, p["max_rounds"] + 1):
        for _ in range(p["surrogate_steps"]):
            idx = rng.choice(n, size=min(bs, n), replace=False)
            v1, v2 = views((x[idx] + delta[idx]).clamp(0, 1), [ids[i] for i in idx])
            bundle.train()
            loss = info_nce(bundle.projector(bundle.encoder(v1)), bundle.projector(bundle.encoder(v2)), p["temperature"])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            bundle.eval()
        accs = []
        for start in range(0, n, bs):
            idx = np.arange(start, min(start + bs, n))
            if len(idx) < 2:
                idx = np.arange(max(0, n - 2), n)
            bids = [ids[i] for i in idx]
            xb, db = x[idx], delta[idx].clone()
            for _ in range(p["delta_steps"]):
                db.requires_grad_(True)
                v1, v2 = views((xb + db).clamp(0, 1), bids)
                z1, z2 = bundle.projector(bundle.encoder(v1)), bundle.projector(bundle.encoder(v2))
                (g,) = torch.autograd.grad(info_nce(z1, z2, p["temperature"]), db)
                db = (db.detach() - step * g.sign()).clamp(-eps, eps)
                db = (xb + db).clamp(0, 1) - xb
            delta[idx] = db.detach()
            with torch.no_grad():
                v1, v2 = views((xb + db).clamp(0, 1), bids)
                accs.append(contrastive_accuracy(bundle.projector(bundle.encoder(v1)), bundle.projector(bundle.encoder(v2))))
        acc = float(np.mean(accs))
        if acc >= p["stop_acc"]:
            converged = True
            break
    if not converged:
        log.warning("CP did not reach stop_acc=%.2f after %d rounds (acc=%.3f)", p["stop_acc"], rounds, acc)
    return _pack(clean, _to_pixels(x, delta, eps), cfg, rounds=rounds, converged=converged, final_acc=acc)


# --------------------------------------------------------------------------
# class-wise heuristics


def craft_lsp(clean: ImageBatch, cfg: GeneratorConfig) -> PoisonedDataset:
    """Linearly separable poison: one block-constant +/-eps pattern per class."""
    p = cfg.resolved()
    eps = cfg.budget.epsilon
    c, h, w = clean.image_shape
    block = p["block_size"] or max(1, h // 4)
    nb_h, nb_w = -(-h // block), -(-w // block)
    rng = np.random.default_rng(cfg.seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(clean.num_classes, c, nb_h, nb_w))
    patterns = np.repeat(np.repeat(signs, block, axis=2), block, axis=3)[:, :, :h, :w] * eps
    x = np.array(clean.pixels, dtype=np.float32)
    delta = torch.from_numpy(patterns[clean.labels].astype(np.float32))
    out = _to_pixels(torch.from_numpy(x), delta, eps)
    return _pack(clean, out, cfg, block_size=block, patterns=signs.astype(int).tolist(),
                 radius_interpretation="Linf")


_COLORS = np.array([[(b >> 2) & 1, (b >> 1) & 1, b & 1] for b in range(8)], dtype=np.float64)


def ops_choices(clean: ImageBatch):
    """Per class (row, col, color) for the one-pixel shortcut.

    The location is the (row, col, channel) where the class mean deviates most
    from the dataset mean (lowest index wins ties); the color pushes every
    channel at that location to the extreme on the side of the class mean.
    A (location, color) pair already used by another class is skipped.
    """
    x = clean.pixels.astype(np.float64)
    c, h, w = clean.image_shape
    mean = x.mean(axis=0)
    taken, out = set(), []
    for k in range(clean.num_classes):
        members = x[clean.labels == k]
        dev = (members.mean(axis=0) - mean) if len(members) else np.zeros((c, h, w))
        score = np.abs(dev).transpose(1, 2, 0).ravel()  # (row, col, channel) order
        for flat in np.argsort(-score, kind="stable"):
            r, col, _ = np.unravel_index(flat, (h, w, c))
            color = tuple(float(v) for v in (dev[:, r, col] >= 0).astype(np.float64))
            if (r, col, color) not in taken:
                taken.add((r, col, color))
                out.append((int(r), int(col), list(color)))
                break
    return out


def craft_ops(clean: ImageBatch, cfg: GeneratorConfig) -> PoisonedDataset:
    """One-pixel shortcut: a fixed pixel location and color per class."""
    choices = ops_choices(clean)
    out = np.array(clean.pixels)
    for k, (r, col, color) in enumerate(choices):
        rows = clean.labels == k
        out[rows, :, r, col] = np.asarray(color, dtype=np.float32)[None, :]
    # a pixel that already had the target color is nudged so the L0 distance is exactly one
    same = np.all(out == clean.pixels, axis=(1, 2, 3))
    for i in np.flatnonzero(same):
        r, col, color = choices[clean.labels[i]]
        ch = 0
        out[i, ch, r, col] = 1.0 - color[ch] if color[ch] in (0.0, 1.0) else 0.0
    return _pack(clean, out, cfg, pixels=[{"row": r, "col": c, "color": col} for r, c, col in choices])


def cuda_kernels(num_classes, size, noise, rng):
    """Identity kernels plus U(-noise, noise) taps, renormalized to unit sum.
    Draws whose tap sum falls below 0.5 are redrawn to keep the filter stable."""
    kernels = []
    for _ in range(num_classes):
        while True:
            k = np.zeros((size, size))
            k[size // 2, size // 2] = 1.0
            k = k + rng.uniform(-noise, noise, size=(size, size)) if noise > 0 else k
            if k.sum() >= 0.5:
                break
        kernels.append(k / k.sum())
    return np.stack(kernels)


def apply_class_kernels(pixels, labels, kernels):
    x = torch.from_numpy(np.asarray(pixels, dtype=np.float64))
    n, c, h, w = x.shape
    size = kernels.shape[-1]
    r = size // 2
    weight = torch.from_numpy(kernels[labels]).repeat_interleave(c, dim=0).unsqueeze(1)
    y = F.pad(x.reshape(1, n * c, h, w), (r, r, r, r), mode="replicate")
    y = F.conv2d(y, weight, groups=n * c).reshape(n, c, h, w)
    return y.clamp(0.0, 1.0).numpy().astype(np.float32)


def craft_cuda(clean: ImageBatch, cfg: GeneratorConfig, kernels: np.ndarray | None = None) -> PoisonedDataset:
    """Convolution-based unlearnable data: one random blur kernel per class."""
    p = cfg.resolved()
    rng = np.random.default_rng(cfg.seed)
    if kernels is None:
        kernels = cuda_kernels(clean.num_classes, p["kernel_size"], p["noise"], rng)
    out = apply_class_kernels(clean.pixels, clean.labels, kernels) if len(clean) else np.array(clean.pixels)
    return _pack(clean, out, cfg, kernels=np.asarray(kernels).tolist())


_CRAFTERS = {
    Generator.AP: craft_ap,
    Generator.UE: craft_ue,
    Generator.RUE: craft_rue,
    Generator.CP: craft_cp,
    Generator.LSP: craft_lsp,
    Generator.OPS: craft_ops,
    Generator.CUDA: craft_cuda,
}


def craft(clean: ImageBatch, cfg: GeneratorConfig) -> PoisonedDataset:
    return _CRAFTERS[cfg.generator](clean, cfg)


# --------------------------------------------------------------------------


@dataclass
class BudgetReport:
    norm: str
    epsilon: float
    distances: np.ndarray
    passed: bool | None  # None for Unbounded generators
    violations: list
    stats: dict

    def to_dict(self):
        return {
            "norm": self.norm,
            "epsilon": self.epsilon,
            "passed": self.passed,
            "violations": list(self.violations),
            "stats": self.stats,
        }


def verify_budget(ds: PoisonedDataset, tolerance: float = 1e-6) -> BudgetReport:
    """Per-sample distance under the declared norm and a pass/fail verdict.

    Unbounded (non-additive) poisons get L-inf / L2 distortion statistics and
    no verdict.
    """
    norm = ds.budget.norm
    d = perturbation_distances(ds.clean.pixels, ds.poisoned.pixels, norm)
    stats = {"max": float(d.max()) if d.size else 0.0, "mean": float(d.mean()) if d.size else 0.0}
    if norm == Norm.UNBOUNDED:
        l2 = perturbation_distances(ds.clean.pixels, ds.poisoned.pixels, Norm.L2)
        stats.update(linf_max=stats["max"], linf_mean=stats["mean"], l2_mean=float(l2.mean()) if l2.size else 0.0)
        return BudgetReport(norm.value, ds.budget.epsilon, d, None, [], stats)
    bad = [ds.clean.ids[i] for i in np.flatnonzero(d > ds.budget.epsilon + tolerance)]
    return BudgetReport(norm.value, ds.budget.epsilon, d, not bad, bad, stats)
