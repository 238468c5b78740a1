"""L-infinity projected gradient descent with a selectable guiding loss."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import torch

from .losses import LossWeights, cross_entropy, info_nce, vespr_loss
from .model import ModelBundle, Outputs

__all__ = ["Guide", "PGDConfig", "pgd_attack", "guiding_loss", "attack_success_stats"]


class Guide(str, enum.Enum):
    CE = "CE"
    CONTRASTIVE = "Contrastive"
    COMBINED = "Combined"


@dataclass(frozen=True)
class PGDConfig:
    epsilon: float = 4 / 255
    step_size: float = 0.6 / 255
    steps: int = 10
    random_start: bool = True
    restarts: int = 0
    guide: Guide = Guide.CE

    def __post_init__(self):
        object.__setattr__(self, "guide", Guide(self.guide))
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0 or self.restarts < 0:
            raise ValueError("steps and restarts must be >= 0")
        if self.steps > 0 and not self.step_size > 0:
            raise ValueError("step_size must be > 0 when steps > 0")

    def to_dict(self):
        d = asdict(self)
        d["guide"] = self.guide.value
        return d


def _per_sample_loss(bundle, x_adv, guide, labels, views, weights):
    """Loss vector (CE guide) or scalar (batch-coupled guides)."""
    out = Outputs(bundle, x_adv)
    if guide == Guide.CE:
        return cross_entropy(out.logits, labels, reduction="none")
    pos = bundle.projector(bundle.encoder(views)).detach()
    if guide == Guide.CONTRASTIVE:
        return info_nce(out.proj, pos, weights.temperature)
    return vespr_loss(out.proj, pos, out.logits, labels, weights).total


def guiding_loss(bundle, x, config: PGDConfig, labels=None, views=None, weights=None):
    """The scalar loss PGD ascends (or descends) for ``config.guide``."""
    weights = weights or LossWeights()
    loss = _per_sample_loss(bundle, x, config.guide, labels, views, weights)
    return loss.mean() if loss.ndim else loss


def pgd_attack(
    bundle: ModelBundle,
    x: torch.Tensor,
    config: PGDConfig,
    *,
    labels=None,
    views=None,
    weights: LossWeights | None = None,
    maximize: bool = True,
    generator: torch.Generator | None = None,
    seed: int = 0,
) -> torch.Tensor:
    """Return a perturbation ``delta`` with ``|delta| <= epsilon`` and ``x + delta`` in [0, 1].

    Each step moves ``delta`` by ``step_size * sign(grad)`` (up the guiding loss
    when ``maximize``, down otherwise) and projects onto the intersection of
    the epsilon ball and the pixel box. With ``restarts > 0`` the attack runs
    ``restarts + 1`` times and keeps, per sample for the CE guide and per batch
    otherwise, the perturbation with the best final loss. Model parameters are
    never modified.

    ``labels`` are required by the CE and Combined guides; ``views`` (the
    unperturbed sibling views) by the Contrastive and Combined guides.
    """
    guide = config.guide
    if guide in (Guide.CE, Guide.COMBINED) and labels is None:
        raise ValueError(f"guide={guide.value} needs labels")
    if guide in (Guide.CONTRASTIVE, Guide.COMBINED) and views is None:
        raise ValueError(f"guide={guide.value} needs a positive view batch")
    weights = weights or LossWeights()
    dtype = next(bundle.parameters()).dtype
    x = torch.as_tensor(x).to(dtype).detach()
    if labels is not None:
        labels = torch.as_tensor(labels, dtype=torch.long)
    if views is not None:
        views = torch.as_tensor(views).to(dtype).detach()
    eps = float(config.epsilon)
    if eps == 0 or x.shape[0] == 0 or (config.steps == 0 and not config.random_start):
        return torch.zeros_like(x)
    if generator is None:
        generator = torch.Generator().manual_seed(int(seed))
    sign = 1.0 if maximize else -1.0

    def project(delta):
        delta = delta.clamp(-eps, eps)
        return (x + delta).clamp(0.0, 1.0) - x

    best_delta, best_loss = None, None
    for _ in range(config.restarts + 1):
        if config.random_start:
            delta = (torch.rand(x.shape, generator=generator, dtype=dtype) * 2 - 1) * eps
            delta = project(delta)
        else:
            delta = torch.zeros_like(x)
        for _ in range(config.steps):
            delta.requires_grad_(True)
            loss = _per_sample_loss(bundle, x + delta, guide, labels, views, weights)
            (grad,) = torch.autograd.grad(loss.sum(), delta)
            delta = project(delta.detach() + sign * config.step_size * grad.sign())
        delta = delta.detach()
        if config.restarts == 0:
            return delta
        with torch.no_grad():
            loss = _per_sample_loss(bundle, x + delta, guide, labels, views, weights)
        score = sign * loss
        if best_delta is None:
            best_delta, best_loss = delta, score
        elif score.ndim:
            better = score > best_loss
            best_delta = torch.where(better.view(-1, 1, 1, 1), delta, best_delta)
            best_loss = torch.maximum(score, best_loss)
        elif score > best_loss:
            best_delta, best_loss = delta, score
    return best_delta


@torch.no_grad()
def attack_success_stats(bundle: ModelBundle, x, labels, delta) -> dict:
    """Mean CE increase and fraction of flipped predictions caused by ``delta``."""
    dtype = next(bundle.parameters()).dtype
    x = torch.as_tensor(x).to(dtype)
    delta = torch.as_tensor(delta).to(dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if x.shape[0] == 0:
        return {"mean_loss_increase": 0.0, "flip_rate": 0.0}
    clean = bundle.classifier(bundle.encoder(x))
    adv = bundle.classifier(bundle.encoder(x + delta))
    inc = cross_entropy(adv, labels, reduction="none") - cross_entropy(clean, labels, reduction="none")
    flips = (adv.argmax(dim=1) != clean.argmax(dim=1)).double().mean()
    return {"mean_loss_increase": float(inc.mean()), "flip_rate": float(flips)}
