"""Supervised, contrastive and combined training losses (torch)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NumericError

__all__ = [
    "LossWeights",
    "LossTerms",
    "cross_entropy",
    "mixed_cross_entropy",
    "info_nce",
    "contrastive_accuracy",
    "cosine_loss",
    "symmetric_cosine_loss",
    "moco_loss",
    "vespr_loss",
]

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5  # contrastive
    beta: float = 0.5  # cross-entropy
    temperature: float = 0.2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.alpha + self.beta > 0:
            raise ValueError("alpha + beta must be > 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


@dataclass
class LossTerms:
    total: torch.Tensor
    contrastive: torch.Tensor
    ce: torch.Tensor

    def as_floats(self):
        return {"total": float(self.total.detach()), "contrastive": float(self.contrastive.detach()), "ce": float(self.ce.detach())}


def _normalize(z, strict):
    norms = z.norm(dim=1, keepdim=True)
    if strict and bool((norms == 0).any()):
        raise NumericError("zero-norm row")
    return z / (norms + (0.0 if strict else NORM_EPS))


def cross_entropy(logits, labels, reduction="mean"):
    """Mean of -log softmax(logits)[label]."""
    if logits.shape[1] < 2:
        raise ValueError("cross entropy needs K >= 2")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels, reduction=reduction)


def mixed_cross_entropy(logits, labels_a, labels_b, lam):
    """lam * CE(y_a) + (1 - lam) * CE(y_b), averaged over the batch."""
    lam = torch.as_tensor(lam, dtype=logits.dtype)
    ce_a = cross_entropy(logits, labels_a, reduction="none")
    ce_b = cross_entropy(logits, labels_b, reduction="none")
    return (lam * ce_a + (1 - lam) * ce_b).mean()


def _nce_logits(proj_a, proj_b, temperature, strict):
    n = proj_a.shape[0]
    z = _normalize(torch.cat([proj_a, proj_b], dim=0), strict)
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return sim, target


def info_nce(proj_a, proj_b, temperature=0.2, *, strict=False):
    """Symmetrized SimCLR InfoNCE.

    Each of the 2N projections is an anchor whose positive is the other view of
    the same sample; the remaining 2N - 2 projections are negatives. The mean
    over all 2N anchors equals 1/2 [L(a->b) + L(b->a)].
    """
    if proj_a.shape[0] < 2:
        raise ValueError("info_nce needs N >= 2")
    if proj_a.shape != proj_b.shape:
        raise ValueError("projection shapes differ")
    sim, target = _nce_logits(proj_a, proj_b, temperature, strict)
    return F.cross_entropy(sim, target)


@torch.no_grad()
def contrastive_accuracy(proj_a, proj_b):
    """Fraction of anchors whose most similar candidate is their positive."""
    sim, target = _nce_logits(proj_a, proj_b, 1.0, False)
    return float((sim.argmax(dim=1) == target).float().mean())


def cosine_loss(pred, target, *, strict=False):
    """-mean cos(pred_i, target_i); the target branch is detached."""
    if pred.shape[0] < 1:
        raise ValueError("cosine_loss needs N >= 1")
    p = _normalize(pred, strict)
    t = _normalize(target.detach(), strict)
    return -(p * t).sum(dim=1).mean()


def symmetric_cosine_loss(pred_a, pred_b, target_a, target_b, *, strict=False):
    """1/2 [cos(p_a, t_b) + cos(p_b, t_a)] loss for SimSiam/BYOL."""
    return 0.5 * (cosine_loss(pred_a, target_b, strict=strict) + cosine_loss(pred_b, target_a, strict=strict))


def moco_loss(q_a, q_b, k_a, k_b, temperature=0.2):
    """Queue-free MoCo: online queries against momentum keys of the other view,
    keys of the other samples in the batch act as negatives. Symmetrized."""

    def one_way(q, k):
        q = _normalize(q, False)
        k = _normalize(k.detach(), False)
        logits = q @ k.T / temperature
        return F.cross_entropy(logits, torch.arange(q.shape[0]))

    return 0.5 * (one_way(q_a, k_b) + one_way(q_b, k_a))


def vespr_loss(proj_adv, proj_pos, logits_adv, labels, weights: LossWeights) -> LossTerms:
    """alpha * InfoNCE(adversarial view, clean sibling) + beta * CE(adversarial view).

    Negatives for each anchor are the other samples' projections in the batch.
    Both raw terms are always reported; a zero-weighted term is detached and
    left out of the total, so the total equals the other weighted term exactly.
    """
    cl = info_nce(proj_adv, proj_pos, weights.temperature)
    ce = cross_entropy(logits_adv, labels)
    if weights.alpha == 0:
        cl = cl.detach()
    if weights.beta == 0:
        ce = ce.detach()
    if weights.alpha == 0:
        total = weights.beta * ce
    elif weights.beta == 0:
        total = weights.alpha * cl
    else:
        total = weights.alpha * cl + weights.beta * ce
    return LossTerms(total, cl, ce)
