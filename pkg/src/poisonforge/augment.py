"""Stochastic view augmentation and augmentation-based defenses.

The view pipeline runs on torch tensors so that it stays differentiable with
respect to the input pixels (contrastive poison crafting back-propagates
through it). Random parameters are drawn per sample from a numpy stream keyed
on ``(policy.seed, key, sample id, view)``, so a sample is augmented the same
way regardless of batch composition or order.

Stage order: padded random crop (translation), random-resized-crop, color
jitter, grayscale, Gaussian blur, horizontal flip, then test-time
resize/center-crop. Input normalization is owned by the model (see
``model.InputNorm``) so that pixels, budgets and every augmentation output
stay in [0, 1].
"""

from __future__ import annotations

import io
import math
import zlib
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageBatch
from .errors import TransformError

__all__ = [
    "AugmentPolicy",
    "identity_policy",
    "pretrain_policy",
    "linprobe_policy",
    "sl_policy",
    "test_policy",
    "apply_policy",
    "augment_tensor",
    "MixedBatch",
    "cutout",
    "mixup",
    "cutmix",
    "iss_transform",
    "gaussian_noise",
    "LUMA",
]

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class AugmentPolicy:
    name: str = "custom"
    pad_crop: int = 0
    crop_scale: tuple = (1.0, 1.0)
    crop_ratio: tuple = (1.0, 1.0)
    jitter_prob: float = 0.0
    jitter: tuple = (0.4, 0.4, 0.4, 0.1)  # brightness, contrast, saturation, hue
    grayscale_prob: float = 0.0
    blur_prob: float = 0.0
    blur_sigma: tuple = (0.1, 2.0)
    blur_kernel: int = 3
    flip_prob: float = 0.0
    resize: int | None = None
    center_crop: int | None = None
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(float(v) for v in self.crop_scale))
        object.__setattr__(self, "crop_ratio", tuple(float(v) for v in self.crop_ratio))
        object.__setattr__(self, "jitter", tuple(float(v) for v in self.jitter))
        object.__setattr__(self, "blur_sigma", tuple(float(v) for v in self.blur_sigma))
        for p in ("jitter_prob", "grayscale_prob", "blur_prob", "flip_prob"):
            v = getattr(self, p)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{p} must lie in [0, 1], got {v}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must be a sub-range of (0, 1], got {self.crop_scale}")
        if not 0.0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ValueError(f"invalid crop_ratio {self.crop_ratio}")
        if self.pad_crop < 0:
            raise ValueError("pad_crop must be >= 0")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be a positive odd integer")

    def with_seed(self, seed: int) -> "AugmentPolicy":
        return replace(self, seed=int(seed))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def identity_policy(seed: int = 0) -> AugmentPolicy:
    return AugmentPolicy(name="identity", seed=seed)


def pretrain_policy(seed: int = 0, crop_scale=(0.4, 1.0)) -> AugmentPolicy:
    """SimSiam-style SSL views: crop, jitter, grayscale, blur, flip."""
    return AugmentPolicy(
        name="pretrain",
        crop_scale=crop_scale,
        crop_ratio=(3 / 4, 4 / 3),
        jitter_prob=0.8,
        jitter=(0.4, 0.4, 0.4, 0.1),
        grayscale_prob=0.2,
        blur_prob=0.5,
        flip_prob=0.5,
        seed=seed,
    )


def linprobe_policy(seed: int = 0, crop_scale=(0.6, 1.0)) -> AugmentPolicy:
    return AugmentPolicy(name="linprobe", crop_scale=crop_scale, crop_ratio=(3 / 4, 4 / 3), flip_prob=0.5, seed=seed)


def sl_policy(seed: int = 0, pad: int = 2) -> AugmentPolicy:
    """Supervised baseline: zero-padded random crop and flip (no resampling)."""
    return AugmentPolicy(name="sl", pad_crop=pad, flip_prob=0.5, seed=seed)


def test_policy(image_size: int | None = None) -> AugmentPolicy:
    """Resize then center-crop; both equal the image side at desk scale."""
    return AugmentPolicy(name="test", resize=image_size, center_crop=image_size)


# --------------------------------------------------------------------------
# per-sample parameters


def _stream(seed, key, sample_id, view):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(key) & 0xFFFFFFFF, zlib.crc32(str(sample_id).encode()), int(view)])


def _sample_crop(rng, h, w, scale, ratio):
    """torchvision-style random-resized-crop box (top, left, height, width)."""
    if scale == (1.0, 1.0) and ratio[0] <= 1.0 <= ratio[1] and h == w:
        return 0, 0, h, w
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _draw_params(policy: AugmentPolicy, ids, key, view, h, w):
    n = len(ids)
    p = {
        "box": np.zeros((n, 4), dtype=np.int64),
        "jitter_on": np.zeros(n, dtype=bool),
        "jitter": np.ones((n, 4)),
        "gray": np.zeros(n, dtype=bool),
        "sigma": np.zeros(n),
        "flip": np.zeros(n, dtype=bool),
        "shift": np.zeros((n, 2), dtype=np.int64),
    }
    b, c, s, hue = policy.jitter
    for i, sid in enumerate(ids):
        rng = _stream(policy.seed, key, sid, view)
        if policy.pad_crop:
            p["shift"][i] = rng.integers(0, 2 * policy.pad_crop + 1, size=2)
        p["box"][i] = _sample_crop(rng, h, w, policy.crop_scale, policy.crop_ratio)
        u = rng.random(4)
        if u[0] < policy.jitter_prob:
            p["jitter_on"][i] = True
            p["jitter"][i] = [
                rng.uniform(max(0.0, 1 - b), 1 + b),
                rng.uniform(max(0.0, 1 - c), 1 + c),
                rng.uniform(max(0.0, 1 - s), 1 + s),
                rng.uniform(-hue, hue),
            ]
        p["gray"][i] = u[1] < policy.grayscale_prob
        if u[2] < policy.blur_prob:
            p["sigma"][i] = rng.uniform(*policy.blur_sigma)
        p["flip"][i] = u[3] < policy.flip_prob
    return p


# --------------------------------------------------------------------------
# differentiable stages


def _gray(x):
    if x.shape[1] != 3:
        return x
    w = torch.tensor(LUMA, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True).expand_as(x)


def _pad_crop(x, shifts, pad):
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    return torch.stack([padded[i, :, dy : dy + h, dx : dx + w] for i, (dy, dx) in enumerate(shifts)])


def _crop_resize(x, boxes, out_h, out_w):
    n, _, h, w = x.shape
    full = (boxes[:, 0] == 0) & (boxes[:, 1] == 0) & (boxes[:, 2] == h) & (boxes[:, 3] == w)
    if full.all() and (out_h, out_w) == (h, w):
        return x
    top, left, ch, cw = (torch.as_tensor(boxes[:, j], dtype=x.dtype) for j in range(4))
    theta = torch.zeros(n, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = cw / w
    theta[:, 0, 2] = (2 * left + cw) / w - 1
    theta[:, 1, 1] = ch / h
    theta[:, 1, 2] = (2 * top + ch) / h - 1
    grid = F.affine_grid(theta, (n, x.shape[1], out_h, out_w), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    if (out_h, out_w) == (h, w) and full.any():
        keep = torch.as_tensor(full).view(n, 1, 1, 1)
        out = torch.where(keep, x, out)
    return out


def _jitter(x, params, on):
    if not on.any() or x.shape[1] != 3:
        return x
    f = torch.as_tensor(params, dtype=x.dtype)
    sel = torch.as_tensor(on).view(-1, 1, 1, 1)
    y = (x * f[:, 0].view(-1, 1, 1, 1)).clamp(0, 1)
    mean = _gray(y)[:, :1].mean(dim=(2, 3), keepdim=True)
    y = ((y - mean) * f[:, 1].view(-1, 1, 1, 1) + mean).clamp(0, 1)
    g = _gray(y)
    y = ((y - g) * f[:, 2].view(-1, 1, 1, 1) + g).clamp(0, 1)
    # hue: rotate chroma in YIQ space
    to_yiq = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=x.dtype)
    from_yiq = torch.linalg.inv(to_yiq)
    yiq = torch.einsum("ij,njhw->nihw", to_yiq, y)
    ang = 2 * math.pi * f[:, 3]
    cos, sin = torch.cos(ang).view(-1, 1, 1), torch.sin(ang).view(-1, 1, 1)
    i2 = yiq[:, 1] * cos - yiq[:, 2] * sin
    q2 = yiq[:, 1] * sin + yiq[:, 2] * cos
    yiq = torch.stack([yiq[:, 0], i2, q2], dim=1)
    y = torch.einsum("ij,njhw->nihw", from_yiq, yiq).clamp(0, 1)
    return torch.where(sel, y, x)


def _blur(x, sigma, k):
    if not (sigma > 0).any():
        return x
    n, c, h, w = x.shape
    r = k // 2
    offs = np.arange(-r, r + 1, dtype=np.float64)
    kern = np.zeros((n, k))
    for i, s in enumerate(sigma):
        if s > 0:
            g = np.exp(-(offs**2) / (2 * s * s))
            kern[i] = g / g.sum()
        else:
            kern[i, r] = 1.0
    kt = torch.as_tensor(kern, dtype=x.dtype).repeat_interleave(c, dim=0)
    y = x.reshape(1, n * c, h, w)
    y = F.pad(y, (r, r, 0, 0), mode="reflect" if w > r else "replicate")
    y = F.conv2d(y, kt.view(n * c, 1, 1, k), groups=n * c)
    y = F.pad(y, (0, 0, r, r), mode="reflect" if h > r else "replicate")
    y = F.conv2d(y, kt.view(n * c, 1, k, 1), groups=n * c)
    return y.reshape(n, c, h, w)


def augment_tensor(policy: AugmentPolicy, x: torch.Tensor, ids, key: int = 0, view: int = 0) -> torch.Tensor:
    """Augment an N x C x H x W tensor; differentiable in ``x``."""
    n, c, h, w = x.shape
    if n == 0:
        return x
    out_h, out_w = h, w
    if policy.resize is not None and policy.center_crop is not None and policy.center_crop > policy.resize:
        raise ValueError(f"center crop {policy.center_crop} larger than resized image {policy.resize}")
    if policy.center_crop is not None and policy.resize is None and policy.center_crop > min(h, w):
        raise ValueError(f"center crop {policy.center_crop} larger than image {h}x{w}")
    p = _draw_params(policy, ids, key, view, h, w)
    y = _pad_crop(x, p["shift"], policy.pad_crop) if policy.pad_crop else x
    y = _crop_resize(y, p["box"], out_h, out_w)
    y = _jitter(y, p["jitter"], p["jitter_on"])
    if p["gray"].any():
        y = torch.where(torch.as_tensor(p["gray"]).view(-1, 1, 1, 1), _gray(y), y)
    y = _blur(y, p["sigma"], policy.blur_kernel)
    if p["flip"].any():
        y = torch.where(torch.as_tensor(p["flip"]).view(-1, 1, 1, 1), torch.flip(y, dims=(3,)), y)
    if policy.resize is not None and policy.resize != h:
        y = F.interpolate(y, size=(policy.resize, policy.resize), mode="bilinear", align_corners=False)
    if policy.center_crop is not None:
        side = y.shape[-1]
        cc = policy.center_crop
        o = (side - cc) // 2
        y = y[:, :, o : o + cc, o : o + cc]
    return y.clamp(0.0, 1.0)


def apply_policy(policy: AugmentPolicy, batch: ImageBatch, views: int = 1, key: int = 0) -> list:
    """Draw ``views`` independent augmentations of every sample.

    ``key`` distinguishes repeated draws with one policy (the trainers pass the
    global step).
    """
    if views < 1:
        raise ValueError("views must be >= 1")
    x = torch.from_numpy(np.array(batch.pixels))
    out = []
    with torch.no_grad():
        for v in range(views):
            y = augment_tensor(policy, x, batch.ids, key=key, view=v).numpy()
            out.append(ImageBatch(y, batch.labels, batch.ids, batch.num_classes))
    return out


# --------------------------------------------------------------------------
# baseline defenses


@dataclass(frozen=True, eq=False)
class MixedBatch:
    pixels: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    lam: np.ndarray  # weight of labels_a, one per sample

    def __post_init__(self):
        if np.any(self.lam < 0) or np.any(self.lam > 1):
            raise ValueError("lambda must lie in [0, 1]")

    @property
    def label_pairs(self):
        return list(zip(self.labels_a.tolist(), self.labels_b.tolist(), self.lam.tolist()))


def cutout(batch: ImageBatch, hole_size: int, rng: np.random.Generator, centers=None) -> ImageBatch:
    """Zero one square hole per image; hole centers are uniform over the image
    unless ``centers`` (N x 2 of row, col) is given. Holes are clipped at borders."""
    n, _, h, w = batch.pixels.shape
    if hole_size < 0 or hole_size > min(h, w):
        raise ValueError(f"hole_size must lie in [0, {min(h, w)}]")
    if centers is None:
        centers = np.stack([rng.integers(0, h, n), rng.integers(0, w, n)], axis=1)
    out = np.array(batch.pixels)
    if hole_size == 0:
        return batch.with_pixels(out)
    for i, (cy, cx) in enumerate(np.asarray(centers)):
        y0, x0 = int(cy) - hole_size // 2, int(cx) - hole_size // 2
        out[i, :, max(0, y0) : max(0, y0 + hole_size), max(0, x0) : max(0, x0 + hole_size)] = 0.0
    return batch.with_pixels(out)


def _partners(n, rng, perm):
    return rng.permutation(n) if perm is None else np.asarray(perm)


def mixup(batch: ImageBatch, alpha: float, rng: np.random.Generator, lam=None, perm=None) -> MixedBatch:
    """Convex mix with a permuted partner; lambda ~ Beta(alpha, alpha) per batch."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    n = len(batch)
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    perm = _partners(n, rng, perm)
    x = batch.pixels.astype(np.float64)
    mixed = np.clip(lam * x + (1 - lam) * x[perm], 0.0, 1.0).astype(np.float32)
    return MixedBatch(mixed, batch.labels.copy(), batch.labels[perm].copy(), np.full(n, lam))


def cutmix_box(h, w, lam, rng, center=None):
    """Rectangle (y0, y1, x0, x1) with nominal area fraction 1 - lam, clipped."""
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(round(h * cut)), int(round(w * cut))
    cy, cx = (int(rng.integers(0, h)), int(rng.integers(0, w))) if center is None else center
    y0, y1 = np.clip([cy - ch // 2, cy - ch // 2 + ch], 0, h)
    x0, x1 = np.clip([cx - cw // 2, cx - cw // 2 + cw], 0, w)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix(batch: ImageBatch, alpha: float, rng: np.random.Generator, lam=None, perm=None, center=None) -> MixedBatch:
    """Paste one partner rectangle per batch; the recorded lambda is the
    realized fraction of pixels kept from the original image."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    n, _, h, w = batch.pixels.shape
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    perm = _partners(n, rng, perm)
    y0, y1, x0, x1 = cutmix_box(h, w, lam, rng, center)
    out = np.array(batch.pixels)
    out[:, :, y0:y1, x0:x1] = batch.pixels[perm][:, :, y0:y1, x0:x1]
    realized = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    return MixedBatch(out, batch.labels.copy(), batch.labels[perm].copy(), np.full(n, realized))


def _jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    from PIL import Image

    c = img.shape[0]
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    pil = Image.fromarray(arr[0] if c == 1 else arr.transpose(1, 2, 0), mode="L" if c == 1 else "RGB")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    dec = np.asarray(Image.open(buf).convert("L" if c == 1 else "RGB"), dtype=np.float32) / np.float32(255.0)
    return dec[None] if c == 1 else dec.transpose(2, 0, 1)


def iss_transform(batch: ImageBatch, mode: str = "Grayscale", jpeg_quality: int = 10) -> ImageBatch:
    """Dataset-level countermeasure: grayscale or a JPEG encode/decode round trip."""
    if mode == "Grayscale":
        x = batch.pixels.astype(np.float64)
        if x.shape[1] != 3:
            return batch.with_pixels(x)
        luma = np.tensordot(np.array(LUMA), x, axes=([0], [1]))
        g = np.clip(luma, 0.0, 1.0)[:, None]
        return batch.with_pixels(np.repeat(g, 3, axis=1))
    if mode == "JPEG":
        if not 1 <= int(jpeg_quality) <= 100:
            raise ValueError("jpeg_quality must lie in [1, 100]")
        try:
            out = np.stack([_jpeg_roundtrip(img, jpeg_quality) for img in batch.pixels]) if len(batch) else batch.pixels
        except Exception as exc:  # codec failures surface as TransformError
            raise TransformError(f"JPEG round trip failed: {exc}") from exc
        return batch.with_pixels(out)
    raise ValueError(f"unknown ISS mode {mode!r}")


def gaussian_noise(batch: ImageBatch, sigma: float, prob: float, rng: np.random.Generator) -> ImageBatch:
    """With probability ``prob`` per image add N(0, sigma^2) noise, then clip."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = batch.pixels
    n = len(batch)
    on = rng.random(n) < prob
    if sigma == 0 or not on.any():
        return batch.with_pixels(x)
    noise = rng.normal(0.0, sigma, size=x.shape)
    out = np.where(on[:, None, None, None], np.clip(x + noise, 0.0, 1.0), x)
    return batch.with_pixels(out)


def gaussian_noise_tensor(x: torch.Tensor, sigma: float, prob: float, gen: torch.Generator) -> torch.Tensor:
    """Tensor variant used inside training loops."""
    if sigma == 0 or prob == 0:
        return x
    on = (torch.rand(x.shape[0], generator=gen, dtype=x.dtype) < prob).view(-1, 1, 1, 1)
    noisy = (x + sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype)).clamp(0.0, 1.0)
    return torch.where(on, noisy, x)
