"""Defense runners and the poison x defense benchmark grid."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import augment as aug
from .data import ImageBatch, PoisonedDataset, make_toy_dataset
from .analysis import analysis_report
from .poisons import GeneratorConfig, craft
from .trainer import ProbeConfig, attach_classifier, default_config, evaluate, linear_probe, train

__all__ = [
    "DEFENSES",
    "ToySpec",
    "run_defense",
    "train_config",
    "toy_split",
    "craft_poison",
    "run_cell",
    "bench_grid",
    "summarize",
    "mean_analysis",
    "derive_seed",
    "cell_key",
]

# defense name -> (trainer method, extra config, dataset pre-transform)
DEFENSES = {
    "SL": ("SL", {}, None),
    "SL_AT": ("SL_AT", {}, None),
    "SL_SSLAUG": ("SL", {"augment": "pretrain"}, None),
    "CUTOUT": ("SL", {"sl_extra": "cutout"}, None),
    "MIXUP": ("SL", {"sl_extra": "mixup"}, None),
    "CUTMIX": ("SL", {"sl_extra": "cutmix"}, None),
    "ISS_GRAY": ("SL", {}, ("Grayscale", None)),
    "ISS_JPEG": ("SL", {}, ("JPEG", 10)),
    "SSL": ("SSL", {}, None),
    "SSL_AT": ("SSL_AT", {}, None),
    "SSL_SL": ("SSL_SL", {}, None),
    "SSL_SL_GN": ("SSL_SL_GN", {}, None),
    "VESPR": ("VESPR", {}, None),
    "VESPR_SSL": ("VESPR_SSL", {}, None),
    "VESPR_BOTH": ("VESPR_BOTH", {}, None),
}


def derive_seed(seed: int, name: str) -> int:
    """Stable 31-bit seed from a root seed and a component name (SHA-256)."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass(frozen=True)
class ToySpec:
    num_classes: int = 4
    per_class: int = 50
    test_per_class: int = 50
    image_size: int = 16


def toy_split(spec: ToySpec, seed: int):
    train_set = make_toy_dataset(spec.num_classes, spec.per_class, spec.image_size, derive_seed(seed, "data.train"),
                                 name="train")
    test_set = make_toy_dataset(spec.num_classes, spec.test_per_class, spec.image_size, derive_seed(seed, "data.test"),
                                name="test")
    return train_set, test_set


def train_config(method_name, seed, overrides=None):
    """The TrainConfig defense ``method_name`` uses (method defaults plus ``overrides``)."""
    method, extra, _ = DEFENSES[method_name]
    extra = dict(extra)
    if extra.get("augment") == "pretrain":
        extra["augment"] = aug.pretrain_policy()
    return default_config(method, seed=seed, **{**extra, **(overrides or {})})


def run_defense(name: str, data, test: ImageBatch, seed: int = 0, *, overrides: dict | None = None,
                probe: ProbeConfig | None = None):
    """Train defense ``name`` on ``data`` and report clean-test accuracy.

    SSL-only defenses are followed by a linear probe fitted on the same
    (poisoned) training data. Returns ``(result dict, bundle, records)``; the
    bundle carries the classifier that produced ``test_acc``.
    """
    if name not in DEFENSES:
        raise ValueError(f"unknown defense {name!r}")
    method, _, pre = DEFENSES[name]
    train_data = data.poisoned if isinstance(data, PoisonedDataset) else data
    if pre is not None:
        mode, quality = pre
        train_data = aug.iss_transform(train_data, mode, quality or 10)
        # the grayscale pre-transform is applied to test inputs as well, as a deployed model would see them
        if mode == "Grayscale":
            test = aug.iss_transform(test, mode)
    cfg = train_config(name, seed, overrides)
    bundle, record = train(cfg, train_data)
    records = {"train": record.to_dict()}
    if method in ("SSL", "SSL_AT"):
        head, prec = linear_probe(bundle, train_data, probe or ProbeConfig(seed=seed))
        bundle = attach_classifier(bundle, head)
        records["probe"] = prec.to_dict()
    result = {"defense": name, "test_acc": evaluate(bundle, test)["accuracy"],
              "train_acc": evaluate(bundle, train_data)["accuracy"], "wall_clock": record.wall_clock}
    return result, bundle, records


def cell_key(payload: dict) -> str:
    """Stable short hash of a cell's full configuration (resume key)."""
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def craft_poison(generator: str, train_set: ImageBatch, seed: int, params: dict | None = None):
    """The training set for one bench row: the clean set itself for ``"Clean"``."""
    if generator == "Clean":
        return train_set
    cfg = GeneratorConfig(generator, params=params or {}, seed=derive_seed(seed, f"craft.{generator}"))
    return craft(train_set, cfg)


def run_cell(poison: str, defense: str, data, test: ImageBatch, seed: int, *, overrides: dict | None = None,
             analyze: bool = False, analysis_kwargs: dict | None = None) -> dict:
    """Train one defense on one (possibly poisoned) training set.

    With ``analyze`` the representation metrics of :func:`analysis_report`
    are added for poisoned rows.
    """
    res, bundle, _ = run_defense(defense, data, test, derive_seed(seed, f"train.{defense}"), overrides=overrides)
    cell = {"poison": poison, "defense": defense, "test_acc": res["test_acc"], "train_acc": res["train_acc"],
            "wall_clock": res["wall_clock"], "error": None}
    if analyze and isinstance(data, PoisonedDataset):
        report = analysis_report(bundle, data, seed=derive_seed(seed, "analysis"), **(analysis_kwargs or {}))
        cell["analysis"] = {k: v for k, v in report.items() if k != "header"}
    return cell


def failed_cell(poison: str, defense: str, exc: BaseException) -> dict:
    return {"poison": poison, "defense": defense, "test_acc": float("nan"), "error": f"{type(exc).__name__}: {exc}"}


def bench_grid(generators, defenses, *, seed=0, spec: ToySpec = ToySpec(), overrides=None, gen_params=None,
               include_clean=False, done=None, on_cell=None, analyze=False, analysis_kwargs=None):
    """Clean-test accuracy for every (poison, defense) cell.

    ``done`` maps cell keys to previously computed cells (resume support);
    ``on_cell(key, cell)`` is called after each new cell. A failing cell is
    recorded as NaN with the error message and the grid continues.
    """
    done = dict(done or {})
    overrides = overrides or {}
    gen_params = gen_params or {}
    train_set, test_set = toy_split(spec, seed)
    cells = []
    poisons = (["Clean"] if include_clean else []) + list(generators)
    for g in poisons:
        ds, craft_error = None, None
        for d in defenses:
            payload = {"seed": seed, "spec": spec.__dict__, "generator": g, "defense": d,
                       "overrides": overrides.get(d, {}), "gen_params": gen_params.get(g, {}), "analyze": analyze}
            key = cell_key(payload)
            if key in done:
                cells.append(done[key])
                continue
            try:
                if craft_error is not None:
                    raise craft_error
                if ds is None:
                    try:
                        ds = craft_poison(g, train_set, seed, gen_params.get(g))
                    except Exception as exc:
                        craft_error = exc
                        raise
                cell = run_cell(g, d, ds, test_set, seed, overrides=overrides.get(d), analyze=analyze,
                                analysis_kwargs=analysis_kwargs)
            except Exception as exc:  # a failed cell must not stop the grid
                cell = failed_cell(g, d, exc)
            cell["key"] = key
            cells.append(cell)
            if on_cell is not None:
                on_cell(key, cell)
    return cells


def summarize(cells, defenses=None):
    """Per-defense Psn Min and Psn Avg over poisoned rows (the Clean row is excluded).

    Failed (NaN) cells are left out of both statistics.
    """
    defenses = defenses or sorted({c["defense"] for c in cells})
    out = {}
    for d in defenses:
        vals = [c["test_acc"] for c in cells if c["defense"] == d and c["poison"] != "Clean"]
        finite = [v for v in vals if not math.isnan(v)]
        out[d] = {
            "psn_min": min(finite) if finite else float("nan"),
            "psn_avg": float(np.mean(finite)) if finite else float("nan"),
        }
    return out


def mean_analysis(cells, defense):
    """Average of each analysis metric over the poisoned rows of ``defense``."""
    rows = [c["analysis"] for c in cells if c["defense"] == defense and c.get("analysis")]
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
