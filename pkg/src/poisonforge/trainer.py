"""Training loops for the supervised, self-supervised and combined defenses.

Every loop is plain mini-batch SGD with momentum and weight decay. The
learning rate is ``base_lr * batch_size / 256`` with an optional linear warmup
followed by a cosine or step schedule. All randomness (initialization,
shuffling, augmentation, PGD starts, noise) derives from ``config.seed``.
"""

from __future__ import annotations

import copy
import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import augment as aug
from .adversary import Guide, PGDConfig, pgd_attack
from .data import ImageBatch, PoisonedDataset
from .errors import TrainingError
from .losses import (
    LossTerms,
    LossWeights,
    contrastive_accuracy,
    cross_entropy,
    info_nce,
    mixed_cross_entropy,
    moco_loss,
    symmetric_cosine_loss,
    vespr_loss,
)
from .model import ModelBundle, build_bundle, momentum_update, param_digest

__all__ = [
    "Method",
    "TrainConfig",
    "ProbeConfig",
    "RunRecord",
    "default_config",
    "train",
    "linear_probe",
    "evaluate",
    "psn_cln_curves",
    "learning_rate",
]


class Method(str, enum.Enum):
    SL = "SL"
    SL_AT = "SL_AT"
    SSL = "SSL"
    SSL_AT = "SSL_AT"
    SSL_SL = "SSL_SL"
    SSL_SL_GN = "SSL_SL_GN"
    VESPR = "VESPR"
    VESPR_SSL = "VESPR_SSL"
    VESPR_BOTH = "VESPR_BOTH"


SUPERVISED = {Method.SL, Method.SL_AT}
SSL_ONLY = {Method.SSL, Method.SSL_AT}
COMBINED = {Method.SSL_SL, Method.SSL_SL_GN, Method.VESPR, Method.VESPR_SSL, Method.VESPR_BOTH}
VESPR_GUIDES = {Method.VESPR: Guide.CE, Method.VESPR_SSL: Guide.CONTRASTIVE, Method.VESPR_BOTH: Guide.COMBINED}
SSL_METHODS = ("SimCLR", "MoCo", "SimSiam", "BYOL")


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.SL
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 1.0
    lr_schedule: str = "Cosine"
    warmup_epochs: int = 0
    step_milestones: tuple = (0.6, 0.75, 0.9)
    step_gamma: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    pgd: PGDConfig = field(default_factory=PGDConfig)
    ssl_method: str = "SimCLR"
    ema: float = 0.999
    noise_sigma: float = 4 / 255
    noise_prob: float = 0.5
    augment: aug.AugmentPolicy | None = None
    sl_extra: str | None = None  # "cutout" | "mixup" | "cutmix"
    cutout_size: int = 4
    mix_alpha: float = 1.0
    arch: str = "TinyConvNet"
    rep_dim: int = 64
    proj_dim: int = 64
    width: int = 32
    projector_layers: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "step_milestones", tuple(self.step_milestones))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in ("Cosine", "Step"):
            raise ValueError(f"lr_schedule must be Cosine or Step, got {self.lr_schedule!r}")
        if self.ssl_method not in SSL_METHODS:
            raise ValueError(f"ssl_method must be one of {SSL_METHODS}")
        if self.sl_extra not in (None, "cutout", "mixup", "cutmix"):
            raise ValueError(f"unknown sl_extra {self.sl_extra!r}")
        if self.method == Method.SSL_SL_GN and (self.noise_sigma < 0 or not 0 <= self.noise_prob <= 1):
            raise ValueError("SSL_SL_GN needs noise_sigma >= 0 and noise_prob in [0, 1]")

    def policy(self) -> aug.AugmentPolicy:
        if self.augment is not None:
            return self.augment.with_seed(self.seed)
        if self.method in SUPERVISED:
            return aug.sl_policy(self.seed)
        return aug.pretrain_policy(self.seed)

    def to_dict(self):
        d = asdict(self)
        d["method"] = self.method.value
        d["pgd"] = self.pgd.to_dict()
        d["weights"] = asdict(self.weights)
        d["augment"] = None if self.augment is None else self.augment.to_dict()
        return d


def default_config(method, **overrides) -> TrainConfig:
    """Desk-scale defaults: supervised runs follow the SL column of the
    training-settings table, everything else the SSL+SL column."""
    method = Method(method)
    if method in SUPERVISED:
        base = dict(base_lr=1.0, warmup_epochs=0, weight_decay=5e-4)
    else:
        base = dict(base_lr=2.0, warmup_epochs=2, weight_decay=1e-4)
    base.update(overrides)
    return TrainConfig(method=method, **base)


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple = (0.6, 0.75, 0.9)
    gamma: float = 0.2
    augment: aug.AugmentPolicy | None = None
    seed: int = 0


@dataclass
class RunRecord:
    method: str
    config: dict
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def learning_rate(step, steps_per_epoch, epochs, base_lr, batch_size, schedule="Cosine", warmup_epochs=0,
                  milestones=(0.6, 0.75, 0.9), gamma=0.2):
    """Per-step learning rate (step counted from 0)."""
    peak = base_lr * batch_size / 256
    total = max(1, steps_per_epoch * epochs)
    warm = steps_per_epoch * min(warmup_epochs, epochs)
    if step < warm:
        return peak * (step + 1) / warm
    if schedule == "Cosine":
        progress = (step - warm) / max(1, total - warm)
        return 0.5 * peak * (1 + math.cos(math.pi * progress))
    epoch = step / max(1, steps_per_epoch)
    drops = sum(epoch >= m * epochs for m in milestones)
    return peak * gamma**drops


def _batches(n, batch_size, rng, min_last):
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < min_last:
        out.pop()
    return out


def _training_set(data):
    if isinstance(data, PoisonedDataset):
        return data.poisoned
    if isinstance(data, ImageBatch):
        return data
    raise TypeError("data must be an ImageBatch or PoisonedDataset")


def _ssl_terms(bundle, cfg, v1, v2, out1_rep=None):
    """SSL loss of two views (``v1`` may be adversarial). Returns (loss, r1)."""
    r1 = bundle.encoder(v1) if out1_rep is None else out1_rep
    r2 = bundle.encoder(v2)
    z1, z2 = bundle.projector(r1), bundle.projector(r2)
    m = cfg.ssl_method
    if m == "SimCLR":
        loss = info_nce(z1, z2, cfg.weights.temperature)
    elif m == "MoCo":
        _, k1 = bundle.momentum_rep_proj(v1)
        _, k2 = bundle.momentum_rep_proj(v2)
        loss = moco_loss(z1, z2, k1, k2, cfg.weights.temperature)
    elif m == "SimSiam":
        loss = symmetric_cosine_loss(bundle.predictor(z1), bundle.predictor(z2), z1, z2)
    else:  # BYOL
        _, t1 = bundle.momentum_rep_proj(v1)
        _, t2 = bundle.momentum_rep_proj(v2)
        loss = symmetric_cosine_loss(bundle.predictor(z1), bundle.predictor(z2), t1, t2)
    return loss, r1, z1, z2


def _bundle_for(cfg: TrainConfig, image_shape, num_classes):
    needs_momentum = cfg.ssl_method in ("MoCo", "BYOL") and cfg.method not in SUPERVISED
    needs_predictor = cfg.ssl_method in ("SimSiam", "BYOL") and cfg.method not in SUPERVISED
    return build_bundle(
        cfg.arch,
        image_shape,
        cfg.rep_dim,
        cfg.proj_dim,
        num_classes,
        cfg.projector_layers,
        needs_momentum,
        cfg.seed,
        with_predictor=needs_predictor,
        width=cfg.width,
    )


def _trainable(bundle, method):
    if method in SUPERVISED:
        mods = [bundle.encoder, bundle.classifier]
    elif method in SSL_ONLY:
        mods = [bundle.encoder, bundle.projector] + ([bundle.predictor] if bundle.predictor is not None else [])
    else:
        mods = bundle.online_modules()
    return [p for m in mods for p in m.parameters()]


def train(
    config: TrainConfig,
    data,
    *,
    test: ImageBatch | None = None,
    bundle: ModelBundle | None = None,
    on_event: Callable[[str, int], None] | None = None,
    epoch_callback: Callable[[int, ModelBundle], dict] | None = None,
    record_steps: bool = True,
):
    """Train a bundle with ``config.method`` on ``data``.

    Returns ``(bundle, RunRecord)``. ``epoch_callback(epoch, bundle)`` is
    called before training (epoch 0) and after every epoch; its dict is merged
    into that epoch's record. ``on_event(name, version)`` reports ``"attack"``
    and ``"update"`` events together with the number of optimizer steps taken
    so far, which exposes the attack-then-update ordering within a step.
    """
    cfg = config
    batch = _training_set(data)
    if len(batch) == 0:
        raise ValueError("training data is empty")
    t0 = time.perf_counter()
    if bundle is None:
        bundle = _bundle_for(cfg, batch.image_shape, batch.num_classes)
    dtype = next(bundle.parameters()).dtype
    record = RunRecord(cfg.method.value, cfg.to_dict())
    params = _trainable(bundle, cfg.method)
    opt = torch.optim.SGD(params, lr=0.0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    policy = cfg.policy()
    x_all = torch.from_numpy(np.array(batch.pixels)).to(dtype)
    y_all = torch.from_numpy(np.array(batch.labels))
    ids = batch.ids
    needs_pairs = cfg.method not in SUPERVISED
    steps_per_epoch = len(_batches(len(batch), cfg.batch_size, np.random.default_rng(0), 2 if needs_pairs else 1))
    if epoch_callback is not None:
        record.epochs.append({"epoch": 0, **epoch_callback(0, bundle)})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = {"total": 0.0, "contrastive": 0.0, "ce": 0.0}
        correct = seen = 0
        for idx in _batches(len(batch), cfg.batch_size, rng, 2 if needs_pairs else 1):
            lr = learning_rate(step, steps_per_epoch, cfg.epochs, cfg.base_lr, cfg.batch_size, cfg.lr_schedule,
                               cfg.warmup_epochs, cfg.step_milestones, cfg.step_gamma)
            for g in opt.param_groups:
                g["lr"] = lr
            bids = [ids[i] for i in idx]
            xb, yb = x_all[idx], y_all[idx]
            try:
                terms, logits = _step_loss(bundle, cfg, policy, xb, yb, bids, step, rng, gen, on_event, step)
            finally:
                bundle.eval()
            if not torch.isfinite(terms.total):
                raise TrainingError(f"non-finite loss at step {step}", step=step)
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            if on_event is not None:
                on_event("update", step)
            opt.step()
            if bundle.has_momentum:
                momentum_update(bundle, cfg.ema)
            vals = terms.as_floats()
            for k in sums:
                sums[k] += vals[k] * len(idx)
            if logits is not None:
                correct += int((logits.argmax(dim=1) == yb).sum())
                seen += len(idx)
            if record_steps:
                record.steps.append({"step": step, "epoch": epoch, "lr": lr, **vals})
            step += 1
        n_used = max(1, sum(len(i) for i in _batches(len(batch), cfg.batch_size, np.random.default_rng(0), 2 if needs_pairs else 1)))
        row = {"epoch": epoch, **{f"loss_{k}": v / n_used for k, v in sums.items()}}
        row["train_acc"] = correct / seen if seen else float("nan")
        if test is not None and cfg.method not in SSL_ONLY:
            row["test_acc"] = evaluate(bundle, test)["accuracy"]
        if epoch_callback is not None:
            row.update(epoch_callback(epoch, bundle))
        record.epochs.append(row)
    record.wall_clock = time.perf_counter() - t0
    return bundle, record


def _step_loss(bundle, cfg, policy, xb, yb, bids, key, rng, gen, on_event, version):
    """Loss terms for one mini-batch plus the logits used for train accuracy.

    Attacks run with the bundle in eval mode; the update pass in train mode.
    """
    m = cfg.method
    zero = xb.new_zeros(())
    if m in SUPERVISED:
        x = aug.augment_tensor(policy, xb, bids, key=key, view=0)
        if cfg.sl_extra in ("mixup", "cutmix"):
            view = ImageBatch(x.numpy(), yb.numpy(), bids, int(bundle.dims["K"]))
            fn = aug.mixup if cfg.sl_extra == "mixup" else aug.cutmix
            mixed = fn(view, cfg.mix_alpha, rng)
            bundle.train()
            logits = bundle.classifier(bundle.encoder(torch.from_numpy(mixed.pixels).to(xb.dtype)))
            ce = mixed_cross_entropy(logits, torch.from_numpy(mixed.labels_a), torch.from_numpy(mixed.labels_b),
                                     torch.from_numpy(mixed.lam))
            return LossTerms(ce, zero, ce), logits
        if cfg.sl_extra == "cutout":
            view = ImageBatch(x.numpy(), yb.numpy(), bids, int(bundle.dims["K"]))
            x = torch.from_numpy(np.array(aug.cutout(view, cfg.cutout_size, rng).pixels)).to(xb.dtype)
        if m == Method.SL_AT:
            if on_event is not None:
                on_event("attack", version)
            x = x + pgd_attack(bundle, x, replace(cfg.pgd, guide=Guide.CE), labels=yb, generator=gen)
        bundle.train()
        logits = bundle.classifier(bundle.encoder(x))
        ce = cross_entropy(logits, yb)
        return LossTerms(ce, zero, ce), logits

    v1 = aug.augment_tensor(policy, xb, bids, key=key, view=0)
    v2 = aug.augment_tensor(policy, xb, bids, key=key, view=1)
    if m == Method.SSL_SL_GN:
        v1 = aug.gaussian_noise_tensor(v1, cfg.noise_sigma, cfg.noise_prob, gen)
        v2 = aug.gaussian_noise_tensor(v2, cfg.noise_sigma, cfg.noise_prob, gen)
    if m == Method.SSL_AT or m in VESPR_GUIDES:
        guide = Guide.CONTRASTIVE if m == Method.SSL_AT else VESPR_GUIDES[m]
        if on_event is not None:
            on_event("attack", version)
        v1 = v1 + pgd_attack(bundle, v1, replace(cfg.pgd, guide=guide), labels=yb, views=v2,
                             weights=cfg.weights, generator=gen)
    bundle.train()
    if m in SSL_ONLY:
        loss, _, z1, z2 = _ssl_terms(bundle, cfg, v1, v2)
        return LossTerms(loss, loss, zero), None
    if cfg.ssl_method == "SimCLR":
        r1 = bundle.encoder(v1)
        logits = bundle.classifier(r1)
        terms = vespr_loss(bundle.projector(r1), bundle.projector(bundle.encoder(v2)), logits, yb, cfg.weights)
        return terms, logits
    cl, r1, _, _ = _ssl_terms(bundle, cfg, v1, v2)
    logits = bundle.classifier(r1)
    ce = cross_entropy(logits, yb)
    w = cfg.weights
    cl_ = cl if w.alpha else cl.detach()
    ce_ = ce if w.beta else ce.detach()
    total = w.beta * ce_ if w.alpha == 0 else (w.alpha * cl_ if w.beta == 0 else w.alpha * cl_ + w.beta * ce_)
    return LossTerms(total, cl_, ce_), logits


@torch.no_grad()
def _reps(encoder, x, batch_size=256):
    return torch.cat([encoder(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)]) if x.shape[0] else encoder(x)


def linear_probe(frozen: ModelBundle, data, probe_config: ProbeConfig | None = None, *, test: ImageBatch | None = None):
    """Fit a fresh linear classifier on frozen encoder outputs.

    Returns ``(classifier, RunRecord)``; the bundle is left untouched. Use
    :func:`attach_classifier` to evaluate the bundle with the probe.
    """
    pc = probe_config or ProbeConfig()
    batch = _training_set(data)
    t0 = time.perf_counter()
    digest = param_digest(frozen)
    dtype = next(frozen.parameters()).dtype
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(pc.seed)
        head = nn.Linear(int(frozen.dims["D"]), batch.num_classes).to(dtype)
    policy = (pc.augment or aug.linprobe_policy()).with_seed(pc.seed)
    opt = torch.optim.SGD(head.parameters(), lr=0.0, momentum=pc.momentum, weight_decay=pc.weight_decay)
    rng = np.random.default_rng(pc.seed)
    x_all = torch.from_numpy(np.array(batch.pixels)).to(dtype)
    y_all = torch.from_numpy(np.array(batch.labels))
    record = RunRecord("linear_probe", {**asdict(pc), "augment": policy.to_dict()})
    steps_per_epoch = len(_batches(len(batch), pc.batch_size, np.random.default_rng(0), 1))
    step = 0
    for epoch in range(1, pc.epochs + 1):
        tot = correct = 0.0
        for idx in _batches(len(batch), pc.batch_size, rng, 1):
            lr = learning_rate(step, steps_per_epoch, pc.epochs, pc.base_lr, pc.batch_size, "Step", 0, pc.milestones, pc.gamma)
            for g in opt.param_groups:
                g["lr"] = lr
            with torch.no_grad():
                x = aug.augment_tensor(policy, x_all[idx], [batch.ids[i] for i in idx], key=step)
                r = frozen.encoder(x)
            logits = head(r)
            loss = cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite probe loss at step {step}", step=step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot += float(loss.detach()) * len(idx)
            correct += float((logits.argmax(dim=1) == y_all[idx]).sum())
            step += 1
        row = {"epoch": epoch, "loss_ce": tot / len(batch), "train_acc": correct / len(batch)}
        if test is not None:
            row["test_acc"] = evaluate(attach_classifier(frozen, head), test)["accuracy"]
        record.epochs.append(row)
    if param_digest(frozen) != digest:
        raise TrainingError("linear probe modified the frozen bundle")
    record.wall_clock = time.perf_counter() - t0
    return head, record


def attach_classifier(bundle: ModelBundle, classifier: nn.Module) -> ModelBundle:
    """Shallow copy of ``bundle`` whose classifier head is ``classifier``."""
    out = copy.copy(bundle)
    out._modules = dict(bundle._modules)
    out._modules["classifier"] = classifier
    return out


@torch.no_grad()
def evaluate(bundle: ModelBundle, test: ImageBatch, policy: aug.AugmentPolicy | None = None) -> dict:
    """Accuracy (argmax, ties to the lower class index), per-class accuracy and mean CE."""
    dtype = next(bundle.parameters()).dtype
    x = torch.from_numpy(np.array(test.pixels)).to(dtype)
    if policy is not None:
        x = aug.augment_tensor(policy, x, test.ids)
    if x.shape[0] == 0:
        return {"accuracy": float("nan"), "per_class_accuracy": [], "mean_loss": float("nan")}
    logits = torch.cat([bundle.classifier(bundle.encoder(x[i : i + 256])) for i in range(0, x.shape[0], 256)])
    pred = np.argmax(logits.numpy(), axis=1)
    labels = test.labels
    hit = pred == labels
    per_class = [float(hit[labels == k].mean()) if np.any(labels == k) else float("nan") for k in range(test.num_classes)]
    loss = float(cross_entropy(logits, torch.from_numpy(np.array(labels)))) if logits.shape[1] >= 2 else float("nan")
    return {"accuracy": float(hit.mean()), "per_class_accuracy": per_class, "mean_loss": loss}


def _mean_pair_cosine(bundle, a, b):
    dtype = next(bundle.parameters()).dtype
    ra = _reps(bundle.encoder, torch.from_numpy(np.array(a)).to(dtype)).double()
    rb = _reps(bundle.encoder, torch.from_numpy(np.array(b)).to(dtype)).double()
    return float(torch.nn.functional.cosine_similarity(ra, rb, dim=1, eps=1e-12).mean())


def psn_cln_curves(config: TrainConfig, poisoned: PoisonedDataset, *, test: ImageBatch | None = None,
                   bundle: ModelBundle | None = None):
    """Train on ``poisoned`` while tracking, per epoch: accuracy on the poisoned
    training images, accuracy on their clean counterparts, and the mean cosine
    similarity between poisoned and clean representations."""

    def probe(epoch, b):
        row = {
            "psn_acc": evaluate(b, poisoned.poisoned)["accuracy"],
            "cln_acc": evaluate(b, poisoned.clean)["accuracy"],
            "psn_cln_sim": _mean_pair_cosine(b, poisoned.poisoned.pixels, poisoned.clean.pixels),
        }
        if test is not None:
            row["test_acc"] = evaluate(b, test)["accuracy"]
        return row

    return train(config, poisoned, bundle=bundle, epoch_callback=probe)
