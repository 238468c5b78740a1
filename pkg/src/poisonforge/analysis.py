"""Representation-geometry metrics, KNN evaluation and embedding export."""

from __future__ import annotations

import numpy as np
import torch

from .data import ImageBatch, PoisonedDataset, RepresentationMatrix, save_dataset
from .errors import NumericError
from .model import ModelBundle

__all__ = [
    "RepresentationMatrix",
    "representations",
    "in_class_similarity",
    "paired_similarity",
    "effective_rank",
    "local_lipschitz",
    "local_lipschitz_per_sample",
    "knn_eval",
    "knn_predict",
    "analysis_report",
    "export_embeddings",
]


def representations(bundle: ModelBundle, batch: ImageBatch, batch_size: int = 256) -> RepresentationMatrix:
    dtype = next(bundle.parameters()).dtype
    x = torch.from_numpy(np.array(batch.pixels)).to(dtype)
    with torch.no_grad():
        chunks = [bundle.encoder(x[i : i + batch_size]) for i in range(0, len(batch), batch_size)]
    reps = torch.cat(chunks).double().numpy() if chunks else np.zeros((0, int(bundle.dims["D"])))
    return RepresentationMatrix(reps, batch.labels, batch.ids)


def _unit_rows(a, strict):
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if strict and np.any(norms == 0):
        raise NumericError("zero-norm representation row")
    return a / np.maximum(norms, 1e-12)


def _as_matrix(R):
    return R.reps if isinstance(R, RepresentationMatrix) else np.asarray(R, dtype=np.float64)


def in_class_similarity(R: RepresentationMatrix, *, skip_small: bool = False, strict: bool = True) -> float:
    """Mean cosine similarity over all unordered same-class pairs (pooled over classes)."""
    z = _unit_rows(R.reps, strict)
    total, count = 0.0, 0
    for k in np.unique(R.labels):
        zk = z[R.labels == k]
        m = len(zk)
        if m < 2:
            if skip_small:
                continue
            raise ValueError(f"class {k} has fewer than 2 samples")
        gram = zk @ zk.T
        total += (gram.sum() - np.trace(gram)) / 2
        count += m * (m - 1) // 2
    if count == 0:
        raise ValueError("no same-class pairs")
    return float(total / count)


def paired_similarity(R_p: RepresentationMatrix, R_c: RepresentationMatrix, *, strict: bool = True) -> float:
    """Mean cosine similarity between aligned poisoned and clean representations."""
    if R_p.ids != R_c.ids:
        raise ValueError("representation ids are not aligned")
    if len(R_p) == 0:
        raise ValueError("empty representation matrices")
    a, b = _unit_rows(R_p.reps, strict), _unit_rows(R_c.reps, strict)
    return float(np.mean(np.sum(a * b, axis=1)))


def effective_rank(R) -> float:
    """exp of the entropy of the normalized singular values of the centered matrix.

    An all-zero centered matrix is defined to have effective rank 1.
    """
    a = _as_matrix(R)
    if a.shape[0] < 2:
        raise ValueError("effective rank needs N >= 2")
    a = a - a.mean(axis=0, keepdims=True)
    s = np.linalg.svd(a, compute_uv=False)
    total = s.sum()
    if total <= 0:
        return 1.0
    p = s / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def local_lipschitz_per_sample(bundle: ModelBundle, x, radius: float = 8 / 255, est_steps: int = 10, seed: int = 0,
                               restarts: int = 1) -> np.ndarray:
    """Per-sample lower estimate of max ||f(x') - f(x)||_1 / ||x' - x||_inf over the L-inf ball.

    Starting from a random corner of the ball, each step moves every
    coordinate to the ball surface in the direction of the numerator's
    gradient sign (a PGD step of size 2 * radius followed by projection), so
    every candidate is a corner. The best ratio seen is reported. Pixels are not
    clipped to [0, 1]: this measures the encoder as a function.
    """
    if not radius > 0:
        raise ValueError("radius must be > 0")
    dtype = next(bundle.parameters()).dtype
    x = torch.as_tensor(np.asarray(getattr(x, "pixels", x)) if not isinstance(x, torch.Tensor) else x).to(dtype)
    n = x.shape[0]
    if n == 0:
        return np.zeros(0)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        fx = bundle.encoder(x)
    best = torch.zeros(n, dtype=torch.float64)

    def ratio(xp):
        num = (bundle.encoder(xp) - fx).abs().flatten(1).sum(dim=1)
        den = (xp - x).abs().flatten(1).amax(dim=1)
        return num, den

    for _ in range(max(1, restarts)):
        s = torch.randint(0, 2, x.shape, generator=gen).to(dtype) * 2 - 1
        for it in range(est_steps + 1):
            xp = (x + radius * s).detach().requires_grad_(True)
            num, den = ratio(xp)
            best = torch.maximum(best, (num / den).detach().double())
            if it == est_steps:
                break
            if not num.requires_grad:
                break
            (g,) = torch.autograd.grad(num.sum(), xp, allow_unused=True)
            if g is None:
                break
            s = torch.where(g != 0, g.sign(), s)
    return best.numpy()


def local_lipschitz(bundle: ModelBundle, x, radius: float = 8 / 255, est_steps: int = 10, seed: int = 0,
                    restarts: int = 1) -> float:
    """Batch mean of :func:`local_lipschitz_per_sample`."""
    vals = local_lipschitz_per_sample(bundle, x, radius, est_steps, seed, restarts)
    return float(vals.mean()) if vals.size else 0.0


def knn_predict(train_reps: RepresentationMatrix, test_reps, k: int = 20, pool: int | None = None, seed: int = 0):
    """Cosine KNN predictions.

    ``pool`` train rows are sampled without replacement (then kept in index
    order, which breaks similarity ties toward lower indices; similarities are
    rounded to 12 decimals so float noise cannot split exact ties). The majority
    label among the top ``k`` wins; among tied labels the one with the
    highest-ranked member wins, so the single nearest neighbor decides when
    its label is tied.
    """
    n_train = len(train_reps)
    pool = min(10240, n_train) if pool is None else pool
    if pool < 1 or n_train == 0:
        raise ValueError("empty KNN pool")
    if not 1 <= k <= pool <= n_train:
        raise ValueError(f"need 1 <= k <= pool <= N_train, got k={k}, pool={pool}, N_train={n_train}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n_train, size=pool, replace=False))
    bank = _unit_rows(train_reps.reps[idx], False)
    bank_labels = train_reps.labels[idx]
    q = _unit_rows(_as_matrix(test_reps), False)
    # similarities equal up to rounding noise count as ties
    sims = np.round(q @ bank.T, 12)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    preds = np.empty(q.shape[0], dtype=np.int64)
    for i, row in enumerate(order):
        labs = bank_labels[row]
        uniq, first, counts = np.unique(labs, return_index=True, return_counts=True)
        top = counts.max()
        cands = uniq[counts == top]
        firsts = first[counts == top]
        preds[i] = cands[np.argmin(firsts)]
    return preds


def knn_eval(train_reps: RepresentationMatrix, test_reps: RepresentationMatrix, k: int = 20, pool: int | None = None,
             seed: int = 0) -> float:
    """Accuracy of :func:`knn_predict` against ``test_reps.labels``."""
    preds = knn_predict(train_reps, test_reps, k, pool, seed)
    return float(np.mean(preds == test_reps.labels)) if len(preds) else float("nan")


def analysis_report(bundle: ModelBundle, poisoned: PoisonedDataset, *, radius: float = 8 / 255, est_steps: int = 10,
                    lip_samples: int | None = None, seed: int = 0) -> dict:
    """The four representation metrics on the poisoned training set.

    ``lip_samples`` caps the number of (evenly spaced) samples used for the
    comparatively expensive local-Lipschitz estimate.
    """
    rp = representations(bundle, poisoned.poisoned)
    rc = representations(bundle, poisoned.clean)
    n = len(poisoned)
    if lip_samples is not None and lip_samples < n:
        pick = np.linspace(0, n - 1, lip_samples).round().astype(int)
    else:
        pick = np.arange(n)
    lip = local_lipschitz(bundle, poisoned.poisoned.pixels[pick], radius, est_steps, seed)
    return {
        "header": {
            "sample_set": "poisoned training set",
            "num_samples": n,
            "lipschitz_samples": int(len(pick)),
            "radius": radius,
            "est_steps": est_steps,
            "generator": poisoned.generator_tag,
        },
        "in_cls_sim_psn": in_class_similarity(rp, skip_small=True, strict=False),
        "psn_cln_sim": paired_similarity(rp, rc, strict=False),
        "e_rank_psn": effective_rank(rp),
        "local_lip_psn": lip,
    }


def export_embeddings(R: RepresentationMatrix, path, extra=None):
    """Write representations, labels and ids to the standard container."""
    save_dataset(R, path, extra=extra)
