"""Dataset containers, the toy dataset generator and on-disk formats.

Pixels are stored as ``float32`` arrays of shape ``(N, C, H, W)`` with values
in ``[0, 1]``. The container file is a fixed magic string, a little-endian
``uint64`` header length, a UTF-8 JSON header and the raw little-endian array
payloads, in the order they are listed in the header.
"""

from __future__ import annotations

import enum
import json
import os
import struct
import tempfile
from dataclasses import InitVar, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError, IntegrityError

__all__ = [
    "Norm",
    "PerturbationBudget",
    "ImageBatch",
    "PoisonedDataset",
    "RepresentationMatrix",
    "perturbation_distances",
    "make_toy_dataset",
    "save_dataset",
    "load_dataset",
    "read_header",
    "write_container",
    "read_container",
    "load_cifar_format",
]

MAGIC = b"PFORGE\x00\x01"
FORMAT_VERSION = 1
BUDGET_TOLERANCE = 1e-6


class Norm(str, enum.Enum):
    LINF = "Linf"
    L2 = "L2"
    L0 = "L0"
    UNBOUNDED = "Unbounded"


@dataclass(frozen=True)
class PerturbationBudget:
    norm: Norm = Norm.LINF
    epsilon: float = 8 / 255

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm(self.norm))
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    def to_dict(self):
        return {"norm": self.norm.value, "epsilon": float(self.epsilon)}

    @classmethod
    def from_dict(cls, d):
        return cls(Norm(d["norm"]), float(d["epsilon"]))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ImageBatch:
    """N images with labels and stable ids. Immutable once built."""

    pixels: np.ndarray
    labels: np.ndarray
    ids: tuple
    num_classes: int

    def __post_init__(self):
        pixels = _frozen(self.pixels, np.float32)
        labels = _frozen(self.labels, np.int64)
        ids = tuple(str(i) for i in self.ids)
        if pixels.ndim != 4:
            raise ValueError(f"pixels must be N x C x H x W, got shape {pixels.shape}")
        n = pixels.shape[0]
        if labels.shape != (n,):
            raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
        if len(ids) != n:
            raise ValueError(f"expected {n} ids, got {len(ids)}")
        if len(set(ids)) != n:
            raise ValueError("ids must be unique")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(pixels)) or (n and (pixels.min() < 0.0 or pixels.max() > 1.0)):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def image_shape(self):
        return tuple(self.pixels.shape[1:])

    def subset(self, index) -> "ImageBatch":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return ImageBatch(
            self.pixels[index], self.labels[index], [self.ids[i] for i in index], self.num_classes
        )

    def with_pixels(self, pixels) -> "ImageBatch":
        """Same labels and ids, new pixel values."""
        return ImageBatch(pixels, self.labels, self.ids, self.num_classes)

    def equals(self, other: "ImageBatch") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.ids == other.ids
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.pixels, other.pixels)
        )


def perturbation_distances(clean: np.ndarray, poisoned: np.ndarray, norm) -> np.ndarray:
    """Per-sample distance between two N x C x H x W arrays under ``norm``.

    L0 counts spatial locations that differ in any channel. ``Unbounded``
    falls back to the L-infinity distance so that distortion can still be
    reported.
    """
    norm = Norm(norm)
    diff = np.asarray(poisoned, np.float64) - np.asarray(clean, np.float64)
    n = diff.shape[0]
    if n == 0:
        return np.zeros(0)
    flat = diff.reshape(n, -1)
    if norm in (Norm.LINF, Norm.UNBOUNDED):
        return np.abs(flat).max(axis=1)
    if norm == Norm.L2:
        return np.sqrt((flat**2).sum(axis=1))
    return (np.abs(diff) > 0).any(axis=1).reshape(n, -1).sum(axis=1).astype(np.float64)


@dataclass(frozen=True, eq=False)
class PoisonedDataset:
    clean: ImageBatch
    poisoned: ImageBatch
    budget: PerturbationBudget
    generator_tag: str
    generator_config: Mapping[str, Any] = field(default_factory=dict)
    validate: InitVar[bool] = True

    def __post_init__(self, validate):
        if self.clean.ids != self.poisoned.ids:
            raise ValueError("clean and poisoned ids differ")
        if not np.array_equal(self.clean.labels, self.poisoned.labels):
            raise ValueError("availability poisons must not change labels")
        if self.clean.image_shape != self.poisoned.image_shape:
            raise ValueError("clean and poisoned image shapes differ")
        violations = self.budget_violations() if validate else []
        if violations:
            raise IntegrityError(
                f"{len(violations)} sample(s) exceed the {self.budget.norm.value} budget "
                f"{self.budget.epsilon:.6g}; first offender: {violations[0]}"
            )

    def __len__(self):
        return len(self.clean)

    def distances(self) -> np.ndarray:
        return perturbation_distances(self.clean.pixels, self.poisoned.pixels, self.budget.norm)

    def budget_violations(self) -> list:
        """Ids of samples whose perturbation exceeds the budget (never for Unbounded)."""
        if self.budget.norm == Norm.UNBOUNDED:
            return []
        d = self.distances()
        bad = np.flatnonzero(d > self.budget.epsilon + BUDGET_TOLERANCE)
        return [self.clean.ids[i] for i in bad]


@dataclass(frozen=True, eq=False)
class RepresentationMatrix:
    """N x D encoder outputs aligned with the ids of the source batch."""

    reps: np.ndarray
    labels: np.ndarray
    ids: tuple

    def __post_init__(self):
        reps = np.array(self.reps, dtype=np.float64, copy=True)
        if reps.ndim == 1 and reps.size == 0:
            reps = reps.reshape(0, 0)
        if reps.ndim != 2:
            raise ValueError(f"reps must be N x D, got shape {reps.shape}")
        labels = _frozen(self.labels, np.int64)
        ids = tuple(str(i) for i in self.ids)
        if labels.shape != (reps.shape[0],) or len(ids) != reps.shape[0]:
            raise ValueError("labels and ids must have one entry per row")
        if not np.all(np.isfinite(reps)):
            raise ValueError("representations must be finite")
        reps.setflags(write=False)
        object.__setattr__(self, "reps", reps)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.reps.shape[0]


# --------------------------------------------------------------------------
# Toy dataset


def _class_layout(num_classes, image_size):
    """Rectangle origin, side and RGB color for each class."""
    grid = int(np.ceil(np.sqrt(num_classes)))
    cell = image_size // grid
    side = max(2, cell // 2)
    layout = []
    for k in range(num_classes):
        r, c = divmod(k, grid)
        top = r * cell + (cell - side) // 2
        left = c * cell + (cell - side) // 2
        hue = k / num_classes
        color = 0.5 + 0.5 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
        layout.append((top, left, side, color))
    return layout


def toy_base_images(num_classes, image_size, channels=3, contrast=0.35):
    """The fixed per-class base images (independent of any seed)."""
    base = np.full((num_classes, channels, image_size, image_size), 0.5)
    for k, (top, left, side, color) in enumerate(_class_layout(num_classes, image_size)):
        color = np.resize(color, channels)
        patch = 0.5 + contrast * (2 * color - 1)
        base[k, :, top : top + side, left : left + side] = patch[:, None, None]
    return base


def make_toy_dataset(
    num_classes: int,
    per_class: int,
    image_size: int,
    seed: int,
    *,
    name: str = "toy",
    channels: int = 3,
    noise: float = 0.05,
    contrast: float = 0.35,
) -> ImageBatch:
    """Linearly learnable synthetic images.

    Every class has a fixed base image (a colored square at a class-indexed
    grid position on a gray background); samples add Gaussian pixel noise and
    are clipped to [0, 1]. Samples are ordered class by class. The base images
    do not depend on ``seed``, so train and test sets drawn with different
    seeds share the same classes.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 2:
        raise ValueError("per_class must be >= 2")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    base = toy_base_images(num_classes, image_size, channels, contrast)
    labels = np.repeat(np.arange(num_classes), per_class)
    rng = np.random.default_rng(seed)
    pixels = base[labels] + rng.normal(0.0, noise, size=(len(labels),) + base.shape[1:])
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    ids = [f"{name}-{i}" for i in range(len(labels))]
    return ImageBatch(pixels, labels, ids, num_classes)


# --------------------------------------------------------------------------
# Container format


def _atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]):
    """Write ``arrays`` (float32/float64/int64) plus a JSON header, atomically."""
    specs, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            dt = "<f8"
        elif arr.dtype.kind == "f":
            dt = "<f4"
        elif arr.dtype.kind in "iu":
            dt = "<i8"
        else:
            raise TypeError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        specs.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    full = {"format_version": FORMAT_VERSION, **dict(header), "arrays": specs}
    head = json.dumps(full, sort_keys=True).encode("utf-8")
    _atomic_write(path, MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs))


def _parse_header(raw: bytes, path):
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: field 'magic': not a poisonforge container")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(raw) < start + hlen:
        raise FormatError(f"{path}: field 'header': truncated ({len(raw) - start} of {hlen} bytes)")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: field 'header': invalid JSON ({exc})") from None
    if not isinstance(header, dict) or "arrays" not in header:
        raise FormatError(f"{path}: field 'arrays': missing from header")
    return header, start + hlen


def read_header(path) -> dict:
    """Header of a container file, without the array payloads."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return _parse_header(raw, path)[0]


def read_container(path):
    """Return ``(header, arrays)``. Raises FormatError on any inconsistency."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header, base = _parse_header(raw, path)
    arrays = {}
    expected = base
    for spec in header["arrays"]:
        name = spec.get("name", "?")
        try:
            dt = np.dtype(spec["dtype"])
            shape = tuple(int(s) for s in spec["shape"])
            start = base + int(spec["offset"])
            nbytes = int(spec["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: field '{name}': malformed array spec") from None
        if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: field '{name}': size does not match shape")
        if start + nbytes > len(raw):
            raise FormatError(f"{path}: field '{name}': truncated payload")
        arrays[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=start).reshape(shape).copy()
        expected = max(expected, start + nbytes)
    if len(raw) != expected:
        raise FormatError(f"{path}: field 'payload': {len(raw) - expected} trailing bytes")
    return header, arrays


def _batch_header(batch: ImageBatch):
    return {"labels": batch.labels.tolist(), "ids": list(batch.ids), "num_classes": batch.num_classes}


def _batch_from(header, pixels, path, field_prefix=""):
    try:
        labels = header["labels"]
        ids = header["ids"]
        k = header["num_classes"]
    except KeyError as exc:
        raise FormatError(f"{path}: field '{field_prefix}{exc.args[0]}': missing") from None
    try:
        return ImageBatch(pixels, labels, ids, k)
    except ValueError as exc:
        raise FormatError(f"{path}: field '{field_prefix}pixels': {exc}") from None


def save_dataset(ds, path, extra: Mapping[str, Any] | None = None):
    """Save an ImageBatch, PoisonedDataset or RepresentationMatrix.

    ``extra`` is embedded verbatim in the header (run config, version string).
    """
    header: dict[str, Any] = {"extra": dict(extra or {})}
    if isinstance(ds, PoisonedDataset):
        header.update(
            kind="poisoned_dataset",
            budget=ds.budget.to_dict(),
            generator_tag=ds.generator_tag,
            generator_config=dict(ds.generator_config),
            **_batch_header(ds.clean),
        )
        arrays = {"clean": ds.clean.pixels, "poisoned": ds.poisoned.pixels}
    elif isinstance(ds, ImageBatch):
        header.update(kind="image_batch", **_batch_header(ds))
        arrays = {"pixels": ds.pixels}
    elif isinstance(ds, RepresentationMatrix):
        header.update(kind="representations", labels=ds.labels.tolist(), ids=list(ds.ids))
        arrays = {"reps": ds.reps}
    else:
        raise TypeError(f"cannot save object of type {type(ds).__name__}")
    write_container(path, header, arrays)


def load_dataset(path):
    """Inverse of :func:`save_dataset`. Bit-exact for pixels, labels, ids and metadata."""
    header, arrays = read_container(path)
    kind = header.get("kind")
    if kind == "image_batch":
        if "pixels" not in arrays:
            raise FormatError(f"{path}: field 'pixels': missing")
        return _batch_from(header, arrays["pixels"], path)
    if kind == "poisoned_dataset":
        for name in ("clean", "poisoned"):
            if name not in arrays:
                raise FormatError(f"{path}: field '{name}': missing")
        clean = _batch_from(header, arrays["clean"], path, "clean.")
        poisoned = _batch_from(header, arrays["poisoned"], path, "poisoned.")
        try:
            budget = PerturbationBudget.from_dict(header["budget"])
            tag = header["generator_tag"]
            cfg = header.get("generator_config", {})
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: field 'budget': {exc}") from None
        return PoisonedDataset(clean, poisoned, budget, tag, cfg)
    if kind == "representations":
        if "reps" not in arrays:
            raise FormatError(f"{path}: field 'reps': missing")
        try:
            return RepresentationMatrix(arrays["reps"], header["labels"], header["ids"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: field 'reps': {exc}") from None
    raise FormatError(f"{path}: field 'kind': unknown container kind {kind!r}")


# --------------------------------------------------------------------------
# CIFAR binary layout

_CIFAR_SIDE = 32
_CIFAR_RECORD = 1 + 3 * _CIFAR_SIDE * _CIFAR_SIDE


def load_cifar_format(directory, split: str = "train", *, num_classes: int = 10, name: str = "cifar") -> ImageBatch:
    """Read CIFAR-10 binary batches (``data_batch_*.bin`` or ``test_batch.bin``).

    Each record is one label byte followed by 1024 red, 1024 green and 1024
    blue bytes in row-major order. The returned pixels are RGB, channel-first
    (N x 3 x 32 x 32), scaled by 1/255 so that 255 maps to exactly 1.0.
    """
    directory = Path(directory)
    if split == "train":
        files = sorted(directory.glob("data_batch_*.bin"))
    elif split == "test":
        files = [directory / "test_batch.bin"] if (directory / "test_batch.bin").exists() else []
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if not files:
        raise FormatError(f"{directory}: field 'files': no CIFAR {split} batch files found")
    chunks = []
    for f in files:
        raw = f.read_bytes()
        if len(raw) == 0 or len(raw) % _CIFAR_RECORD:
            raise FormatError(f"{f}: field 'records': size {len(raw)} is not a multiple of {_CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise FormatError(f"{directory}: field 'labels': label {labels.max()} >= num_classes")
    pixels = records[:, 1:].reshape(-1, 3, _CIFAR_SIDE, _CIFAR_SIDE).astype(np.float32) / np.float32(255.0)
    ids = [f"{name}-{split}-{i}" for i in range(len(labels))]
    return ImageBatch(pixels, labels, ids, num_classes)
