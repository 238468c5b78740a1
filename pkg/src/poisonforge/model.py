"""Encoder / projector / classifier bundles.

A bundle follows the usual multi-head SSL layout: an encoder ``f`` maps images
to D-dimensional representations, a projector ``g`` maps representations to
the contrastive space and a linear classifier ``c`` maps them to logits.
Networks are tiny and free of batch normalization so that CPU training takes
seconds and every forward pass is a pure function of the input.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import read_container, write_container
from .errors import FormatError, StateError, UnsupportedOperationError

__all__ = [
    "InputNorm",
    "TinyConvNet",
    "MLPEncoder",
    "ModelBundle",
    "Outputs",
    "build_bundle",
    "forward",
    "grad_wrt_input",
    "momentum_update",
    "param_digest",
    "save_bundle",
    "load_bundle",
    "ParameterSet",
]

HEADS = ("rep", "proj", "logits")


class InputNorm(nn.Module):
    """Fixed per-channel standardization applied inside the encoder."""

    def __init__(self, mean=0.5, std=0.25):
        super().__init__()
        self.mean = mean
        self.std = std

    def forward(self, x):
        return (x - self.mean) / self.std


class TinyConvNet(nn.Module):
    """Two conv stages and a global average pool."""

    def __init__(self, in_channels, dim, width=32):
        super().__init__()
        self.body = nn.Sequential(
            InputNorm(),
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Conv2d(width, dim, 3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x):
        return self.body(x)


class MLPEncoder(nn.Module):
    def __init__(self, in_features, dim, hidden=None):
        super().__init__()
        hidden = hidden or 2 * dim
        self.body = nn.Sequential(
            InputNorm(),
            nn.Flatten(),
            nn.Linear(in_features, hidden),
            nn.ReLU(),
            nn.Linear(hidden, dim),
            nn.ReLU(),
        )

    def forward(self, x):
        return self.body(x)


def mlp_head(d_in, hidden, d_out, layers):
    """``layers`` affine maps with ReLU between them; the last map is linear."""
    if layers < 1:
        raise ValueError("projector needs at least one layer")
    mods, d = [], d_in
    for _ in range(layers - 1):
        mods += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    mods.append(nn.Linear(d, d_out))
    return nn.Sequential(*mods)


class ModelBundle(nn.Module):
    def __init__(self, encoder, projector, classifier, dims, arch=None, predictor=None, with_momentum=False):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.classifier = classifier
        self.predictor = predictor
        self.dims = dict(dims)
        self.arch = dict(arch or {})
        if with_momentum:
            self.momentum_encoder = copy.deepcopy(encoder).requires_grad_(False)
            self.momentum_projector = copy.deepcopy(projector).requires_grad_(False)
        else:
            self.momentum_encoder = None
            self.momentum_projector = None

    @property
    def has_momentum(self):
        return self.momentum_encoder is not None

    def online_modules(self):
        mods = [self.encoder, self.projector, self.classifier]
        return mods + ([self.predictor] if self.predictor is not None else [])

    def momentum_pairs(self):
        return [(self.momentum_encoder, self.encoder), (self.momentum_projector, self.projector)]

    def momentum_rep_proj(self, x):
        with torch.no_grad():
            r = self.momentum_encoder(x)
            return r, self.momentum_projector(r)


def build_bundle(
    arch: str = "TinyConvNet",
    image_shape=(3, 16, 16),
    D: int = 64,
    P: int = 64,
    K: int = 10,
    projector_layers: int = 3,
    with_momentum: bool = False,
    seed: int = 0,
    *,
    projector_hidden: int | None = None,
    with_predictor: bool = False,
    predictor_hidden: int | None = None,
    width: int = 32,
    dtype=torch.float32,
) -> ModelBundle:
    if min(D, P, K) < 1:
        raise ValueError("D, P and K must be >= 1")
    if len(image_shape) != 3 or min(image_shape) < 1:
        raise ValueError(f"image_shape must be (C, H, W), got {image_shape}")
    c, h, w = (int(v) for v in image_shape)
    projector_hidden = projector_hidden or P
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if arch == "TinyConvNet":
            if h < 2 or w < 2:
                raise ValueError("TinyConvNet needs images of at least 2x2")
            encoder = TinyConvNet(c, D, width)
        elif arch == "MLP":
            encoder = MLPEncoder(c * h * w, D)
        else:
            raise ValueError(f"unknown arch {arch!r}")
        projector = mlp_head(D, projector_hidden, P, projector_layers)
        classifier = nn.Linear(D, K)
        predictor = mlp_head(P, predictor_hidden or max(P // 2, 1), P, 2) if with_predictor else None
    descriptor = {
        "arch": arch,
        "image_shape": [c, h, w],
        "D": D,
        "P": P,
        "K": K,
        "projector_layers": projector_layers,
        "projector_hidden": projector_hidden,
        "with_momentum": bool(with_momentum),
        "with_predictor": bool(with_predictor),
        "predictor_hidden": predictor_hidden,
        "width": width,
        "seed": seed,
    }
    bundle = ModelBundle(
        encoder, projector, classifier, {"D": D, "P": P, "K": K}, descriptor, predictor, with_momentum
    )
    # bundles live in eval mode; training loops switch to train mode only for update passes
    return bundle.to(dtype).eval()


class Outputs:
    """Lazily evaluated heads of one forward pass."""

    def __init__(self, bundle: ModelBundle, x: torch.Tensor):
        self.bundle = bundle
        self.x = x
        self._cache = {}

    @property
    def rep(self):
        if "rep" not in self._cache:
            self._cache["rep"] = self.bundle.encoder(self.x)
        return self._cache["rep"]

    @property
    def proj(self):
        if "proj" not in self._cache:
            self._cache["proj"] = self.bundle.projector(self.rep)
        return self._cache["proj"]

    @property
    def logits(self):
        if "logits" not in self._cache:
            self._cache["logits"] = self.bundle.classifier(self.rep)
        return self._cache["logits"]

    def __getitem__(self, head):
        return getattr(self, head)


def _check_input(bundle, x):
    shape = tuple(bundle.arch.get("image_shape", ()))
    if x.ndim != 4 or (shape and tuple(x.shape[1:]) != shape):
        raise ValueError(f"input of shape {tuple(x.shape)} does not match bundle image shape {shape}")


def _as_tensor(bundle, x):
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(getattr(x, "pixels", x)))
    dtype = next(bundle.parameters()).dtype
    return x.to(dtype)


def forward(bundle: ModelBundle, x, heads=("rep",)) -> dict:
    """Evaluate the requested heads (any of ``rep``, ``proj``, ``logits``).

    Accepts a tensor, an array or an ImageBatch. Only the networks needed for
    the requested heads are evaluated. Runs without gradient tracking.
    """
    heads = set(heads)
    unknown = heads - set(HEADS)
    if unknown:
        raise ValueError(f"unknown heads {sorted(unknown)}")
    x = _as_tensor(bundle, x)
    _check_input(bundle, x)
    out = Outputs(bundle, x)
    with torch.no_grad():
        return {h: out[h] for h in HEADS if h in heads}


def grad_wrt_input(bundle: ModelBundle, x, loss_closure) -> torch.Tensor:
    """Exact gradient of ``loss_closure(Outputs)`` with respect to the input.

    The closure must return a scalar tensor. A tensor that does not depend on
    the input yields a zero gradient; a non-tensor result cannot be
    differentiated and raises UnsupportedOperationError. Parameter gradients are
    never accumulated.
    """
    x = _as_tensor(bundle, x).detach().clone().requires_grad_(True)
    _check_input(bundle, x)
    loss = loss_closure(Outputs(bundle, x))
    if not isinstance(loss, torch.Tensor):
        raise UnsupportedOperationError("loss closure must return a torch scalar tensor")
    if loss.numel() != 1:
        raise ValueError("loss closure must return a scalar")
    if not loss.requires_grad:
        return torch.zeros_like(x).detach()
    (g,) = torch.autograd.grad(loss.reshape(()), x, allow_unused=True)
    return torch.zeros_like(x).detach() if g is None else g.detach()


@torch.no_grad()
def momentum_update(bundle: ModelBundle, m: float):
    """momentum <- m * momentum + (1 - m) * source, elementwise."""
    if not bundle.has_momentum:
        raise StateError("bundle has no momentum copy")
    if not 0.0 <= m <= 1.0:
        raise ValueError("m must lie in [0, 1]")
    for mom, src in bundle.momentum_pairs():
        for pm, ps in zip(mom.parameters(), src.parameters()):
            pm.mul_(m).add_(ps.detach(), alpha=1.0 - m)


def param_digest(*modules) -> str:
    h = hashlib.sha256()
    for mod in modules:
        for name, t in mod.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_bundle(bundle: ModelBundle, path, extra=None):
    """Checkpoint: architecture descriptor in the header, parameters as arrays."""
    arrays = {k: v.detach().cpu().numpy() for k, v in bundle.state_dict().items()}
    dtype = str(next(bundle.parameters()).dtype).replace("torch.", "")
    write_container(path, {"kind": "checkpoint", "architecture": bundle.arch, "dtype": dtype, "extra": dict(extra or {})}, arrays)


def load_bundle(path) -> ModelBundle:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: field 'kind': not a checkpoint")
    a = dict(header["architecture"])
    dtype = getattr(torch, header.get("dtype", "float32"))
    bundle = build_bundle(
        a["arch"],
        tuple(a["image_shape"]),
        a["D"],
        a["P"],
        a["K"],
        a["projector_layers"],
        a["with_momentum"],
        a.get("seed", 0),
        projector_hidden=a.get("projector_hidden"),
        with_predictor=a.get("with_predictor", False),
        predictor_hidden=a.get("predictor_hidden"),
        width=a.get("width", 32),
        dtype=dtype,
    )
    expected = bundle.state_dict()
    missing = set(expected) - set(arrays)
    if missing:
        raise FormatError(f"{path}: field '{sorted(missing)[0]}': missing parameter")
    state = {k: torch.from_numpy(arrays[k]) for k in expected}
    bundle.load_state_dict(state)
    return bundle


@dataclass
class ParameterSet:
    """Named parameter arrays in a stable order."""

    names: list
    arrays: list

    @classmethod
    def from_module(cls, module):
        items = list(module.state_dict().items())
        return cls([k for k, _ in items], [v.detach().cpu().numpy().copy() for _, v in items])

    def __post_init__(self):
        if len(self.names) != len(self.arrays):
            raise ValueError("names and arrays differ in length")
        for name, a in zip(self.names, self.arrays):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name!r} has non-finite values")

    def load_into(self, module):
        """Copy the arrays back into ``module`` (names must match its state dict)."""
        module.load_state_dict({k: torch.from_numpy(np.asarray(a)) for k, a in zip(self.names, self.arrays)})
        return module
