"""Command-line entry points: ``craft``, ``train``, ``analyze`` and ``bench``.

Every command reads the layered run configuration (``--config`` file,
``POISONFORGE_*`` environment variables, repeated ``--set key=value``), takes
all randomness from ``--seed`` and embeds the resolved configuration and the
package version in every file it writes. Failures print one JSON line on
stderr and exit nonzero (2 for configuration errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import analysis_report, export_embeddings, knn_eval, representations
from .config import RunConfig, load_config
from .data import ImageBatch, PoisonedDataset, load_cifar_format, load_dataset, save_dataset
from .errors import ConfigError, PoisonForgeError
from .experiments import (
    DEFENSES,
    cell_key,
    craft_poison,
    derive_seed,
    failed_cell,
    run_cell,
    run_defense,
    summarize,
    toy_split,
    train_config,
)
from .model import load_bundle, save_bundle
from .poisons import craft, verify_budget
from .trainer import psn_cln_curves

__all__ = ["main", "build_parser"]


def _write_text(path, text: str):
    """Atomic text write (temp file in the target directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _write_json(path, payload):
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _stamp(cfg: RunConfig, command: str) -> dict:
    return {"version": __version__, "command": command, "run_config": cfg.to_dict()}


def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", key=item, module="cli")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key, attr in (("generator.name", "generator"), ("train.method", "method")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    return load_config(args.config, overrides=overrides)


def _clean_sets(cfg: RunConfig, seed: int):
    """(train, test) clean sets as described by the ``data.*`` keys."""
    source = cfg["data.source"]
    if source == "toy":
        train_set, test_set = toy_split(cfg.toy_spec(), seed)
    elif source == "cifar":
        train_set = load_cifar_format(cfg["data.path"], "train", num_classes=cfg["data.num_classes"])
        test_set = load_cifar_format(cfg["data.path"], "test", num_classes=cfg["data.num_classes"])
    else:
        train_set = _as_batch(load_dataset(cfg["data.path"]), "data.path")
        test_set = None
    if cfg["data.test_path"]:
        test_set = _as_batch(load_dataset(cfg["data.test_path"]), "data.test_path")
    return train_set, test_set


def _as_batch(obj, key):
    if isinstance(obj, ImageBatch):
        return obj
    if isinstance(obj, PoisonedDataset):
        return obj.poisoned
    raise ConfigError(f"{key}: expected an image dataset file", key=key, module="data")


# --------------------------------------------------------------------------
# craft


def cmd_craft(args) -> int:
    cfg = _resolve(args)
    seed = cfg["run.seed"]
    if args.input is not None:
        clean = _as_batch(load_dataset(args.input), "--in")
    else:
        clean, _ = _clean_sets(cfg, seed)
    gcfg = cfg.generator_config(derive_seed(seed, f"craft.{cfg['generator.name']}"))
    ds = craft(clean, gcfg)
    report = verify_budget(ds)
    if report.passed is False:
        raise PoisonForgeError(f"crafted dataset violates its budget ({len(report.violations)} samples)")
    save_dataset(ds, args.out, extra={**_stamp(cfg, "craft"), "budget_report": report.to_dict()})
    print(json.dumps({"out": str(args.out), "generator": ds.generator_tag, "samples": len(ds),
                      "budget_passed": report.passed}))
    return 0


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _resolve(args)
    seed = cfg["run.seed"]
    method = cfg.method()
    clean_train, test_set = _clean_sets(cfg, seed)
    data = load_dataset(args.data) if args.data is not None else clean_train
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_seed = derive_seed(seed, f"train.{method}")
    overrides = cfg.train_overrides()
    payload = {**_stamp(cfg, "train"), "method": method, "train_seed": train_seed}
    if args.curves:
        if not isinstance(data, PoisonedDataset):
            raise ConfigError("--curves needs a poisoned dataset (--data)", key="--curves", module="cli")
        if DEFENSES[method][0] in ("SSL", "SSL_AT") or DEFENSES[method][2] is not None:
            raise ConfigError(f"--curves needs a method that trains its classifier on the raw data, got {method}",
                              key="train.method", module="train")
        config = train_config(method, train_seed, overrides)
        bundle, record = psn_cln_curves(config, data, test=test_set)
        payload["curves"] = record.epochs
        payload["record"] = record.to_dict()
        result = {"test_acc": record.epochs[-1].get("test_acc")}
    else:
        if test_set is None:
            raise ConfigError("no test set: set data.test_path or use data.source = toy", key="data.test_path",
                              module="data")
        result, bundle, records = run_defense(method, data, test_set, train_seed, overrides=overrides,
                                              probe=cfg.probe_config(derive_seed(seed, "probe")))
        payload["record"] = records
        payload["result"] = result
    ckpt = out / "model.ckpt"
    save_bundle(bundle, ckpt, extra=_stamp(cfg, "train"))
    payload["checkpoint"] = str(ckpt)
    _write_json(out / "record.json", payload)
    if args.curves:
        _write_json(out / "curves.json", {**_stamp(cfg, "train"), "curves": payload["curves"]})
    print(json.dumps({"out": str(out), "method": method, "test_acc": result.get("test_acc")}))
    return 0


# --------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    seed = cfg["run.seed"]
    bundle = load_bundle(args.model)
    data = load_dataset(args.data)
    if not isinstance(data, PoisonedDataset):
        raise ConfigError("--data must be a poisoned dataset file", key="--data", module="cli")
    report = analysis_report(bundle, data, seed=derive_seed(seed, "analysis"), **cfg.analysis_kwargs())
    rp = representations(bundle, data.poisoned)
    if args.knn:
        _, test_set = _clean_sets(cfg, seed)
        if test_set is not None:
            report["knn_acc"] = knn_eval(rp, representations(bundle, test_set), cfg["analysis.knn_k"],
                                         cfg["analysis.knn_pool"], derive_seed(seed, "knn"))
    report["header"].update(_stamp(cfg, "analyze"))
    if args.export_reps is not None:
        export_embeddings(rp, args.export_reps, extra=_stamp(cfg, "analyze"))
        report["header"]["exported_reps"] = str(args.export_reps)
    _write_json(args.out, report)
    print(json.dumps({k: v for k, v in report.items() if k != "header"}, default=_json_default))
    return 0


# --------------------------------------------------------------------------
# bench


def _craft_job(generator, cfg_values, seed, path):
    """Craft one bench row's poison into ``path`` (runs in a worker process)."""
    import torch

    torch.set_num_threads(1)
    cfg = RunConfig(cfg_values)
    train_set, _ = toy_split(cfg.toy_spec(), seed)
    params = _gen_params(cfg, generator)
    ds = craft_poison(generator, train_set, seed, params)
    save_dataset(ds, path, extra=_stamp(cfg, "bench"))
    return str(path)


def _cell_job(poison, defense, cfg_values, seed, poison_path, cell_path, key):
    """Train and evaluate one bench cell, writing it to ``cell_path``."""
    import torch

    torch.set_num_threads(1)
    cfg = RunConfig(cfg_values)
    train_set, test_set = toy_split(cfg.toy_spec(), seed)
    try:
        if poison_path is None:
            data = train_set
        elif isinstance(poison_path, str) and poison_path.startswith("error:"):
            raise PoisonForgeError(poison_path[len("error:"):].strip())
        else:
            data = load_dataset(poison_path)
        cell = run_cell(poison, defense, data, test_set, seed, overrides=cfg.train_overrides())
    except Exception as exc:  # recorded as NaN; the grid continues
        cell = failed_cell(poison, defense, exc)
    cell["key"] = key
    _write_json(cell_path, {**_stamp(cfg, "bench"), "cell": cell})
    return cell


def _gen_params(cfg: RunConfig, generator: str) -> dict:
    if generator == "Clean":
        return {}
    from .poisons import DEFAULT_PARAMS, Generator

    return {n: cfg[f"generator.{n}"] for n in DEFAULT_PARAMS[Generator(generator)] if cfg[f"generator.{n}"] is not None}


def _bench_key(cfg: RunConfig, poison: str, defense: str) -> str:
    values = {k: v for k, v in cfg.to_dict().items() if not k.startswith(("bench.", "generator.name", "train.method"))}
    return cell_key({"version": __version__, "config": values, "poison": poison, "defense": defense})


def bench_table(cells, poisons, methods) -> str:
    """CSV text: one row per poison, then ``Psn Min`` and ``Psn Avg`` rows."""
    by = {(c["poison"], c["defense"]): c["test_acc"] for c in cells}
    summary = summarize(cells, methods)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["poison"] + list(methods))

    def fmt(v):
        return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"

    for p in poisons:
        w.writerow([p] + [fmt(by.get((p, m))) for m in methods])
    w.writerow(["Psn Min"] + [fmt(summary[m]["psn_min"]) for m in methods])
    w.writerow(["Psn Avg"] + [fmt(summary[m]["psn_avg"]) for m in methods])
    return buf.getvalue()


def cmd_bench(args) -> int:
    overrides = {}
    if args.generators:
        overrides["bench.generators"] = args.generators
    if args.methods:
        overrides["bench.methods"] = args.methods
    if args.include_clean:
        overrides["bench.include_clean"] = "true"
    args.set = list(args.set or []) + [f"{k}={v}" for k, v in overrides.items()]
    cfg = _resolve(args)
    seed = cfg["run.seed"]
    out = Path(args.out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "poisons").mkdir(parents=True, exist_ok=True)
    methods = list(cfg["bench.methods"])
    poisons = (["Clean"] if cfg["bench.include_clean"] else []) + list(cfg["bench.generators"])
    values = cfg.to_dict()

    cells, todo = {}, []
    for p in poisons:
        for m in methods:
            key = _bench_key(cfg, p, m)
            path = out / "cells" / f"{key}.json"
            if path.exists():
                try:
                    cells[(p, m)] = json.loads(path.read_text())["cell"]
                    continue
                except (ValueError, KeyError):
                    pass  # unreadable cell file: recompute it
            todo.append((p, m, key, path))

    needed = sorted({p for p, *_ in todo if p != "Clean"}, key=poisons.index)
    poison_paths = {"Clean": None}
    jobs = max(1, args.jobs)
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        futures = {}
        for g in needed:
            gkey = cell_key({"version": __version__, "seed": seed, "generator": g, "params": _gen_params(cfg, g),
                             "data": {k: v for k, v in values.items() if k.startswith("data.")}})
            path = out / "poisons" / f"{g}-{gkey}.pf"
            if path.exists():
                poison_paths[g] = str(path)
            elif pool is None:
                futures[g] = _call(_craft_job, g, values, seed, path)
            else:
                futures[g] = pool.submit(_craft_job, g, values, seed, path)
        for g, fut in futures.items():
            try:
                poison_paths[g] = fut.result()
            except Exception as exc:  # every cell of this row fails with the crafting error
                poison_paths[g] = f"error: {type(exc).__name__}: {exc}"
        pending = []
        for p, m, key, path in todo:
            job = (p, m, values, seed, poison_paths[p], path, key)
            pending.append(_call(_cell_job, *job) if pool is None else pool.submit(_cell_job, *job))
        for (p, m, _, _), fut in zip(todo, pending):
            cells[(p, m)] = fut.result()
            if not args.quiet:
                c = cells[(p, m)]
                print(json.dumps({"poison": p, "defense": m, "test_acc": c["test_acc"], "error": c["error"]}),
                      flush=True)
    finally:
        if pool is not None:
            pool.shutdown()

    ordered = [cells[(p, m)] for p in poisons for m in methods]
    stamp = _stamp(cfg, "bench")
    header = f"# poisonforge {__version__}\n# run_config {json.dumps(stamp['run_config'], sort_keys=True)}\n"
    _write_text(out / "table.csv", header + bench_table(ordered, poisons, methods))
    _write_json(out / "summary.json", {**stamp, "summary": summarize(ordered, methods), "cells": ordered})
    print(json.dumps({"out_dir": str(out), "summary": summarize(ordered, methods)}))
    return 0


class _Done:
    """Already-computed result with the ``Future.result`` interface."""

    def __init__(self, value=None, exc=None):
        self._value, self._exc = value, exc

    def result(self):
        if self._exc is not None:
            raise self._exc
        return self._value


def _call(fn, *args):
    try:
        return _Done(fn(*args))
    except Exception as exc:
        return _Done(exc=exc)


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="dotted-key config file")
    common.add_argument("--seed", type=int, help="root seed for all randomness (run.seed)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    parser = argparse.ArgumentParser(prog="poisonforge", description="Availability-poisoning defense workbench.")
    parser.add_argument("--version", action="version", version=f"poisonforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("craft", parents=[common], help="craft a poisoned dataset")
    p.add_argument("--generator", help="AP, UE, RUE, CP, LSP, OPS or CUDA (generator.name)")
    p.add_argument("--in", dest="input", help="clean dataset file (default: the data.* source)")
    p.add_argument("--out", required=True, help="output poisoned dataset file")
    p.set_defaults(func=cmd_craft)

    p = sub.add_parser("train", parents=[common], help="train a defense")
    p.add_argument("--method", help="defense name (train.method)")
    p.add_argument("--data", help="training dataset file (default: the clean data.* source)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--curves", action="store_true", help="record per-epoch poison/clean accuracy and similarity")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", parents=[common], help="representation metrics of a trained model")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="poisoned dataset file")
    p.add_argument("--out", required=True, help="output report.json")
    p.add_argument("--export-reps", help="also write poisoned-set representations to this file")
    p.add_argument("--knn", action="store_true", help="add KNN accuracy on the clean test set")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", parents=[common], help="poison x defense grid of clean-test accuracies")
    p.add_argument("--generators", help="comma-separated generators (bench.generators)")
    p.add_argument("--methods", help="comma-separated defenses (bench.methods)")
    p.add_argument("--include-clean", action="store_true", help="add a Clean row")
    p.add_argument("--out-dir", required=True, help="output directory (rerun to resume)")
    p.add_argument("--jobs", type=int, default=1, help="cells run concurrently")
    p.add_argument("--quiet", action="store_true", help="no per-cell progress lines")
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(exc, code):
    record = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record.update(key=exc.key, module=exc.module)
    print("poisonforge: " + json.dumps(record, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(exc, 2)
    except (PoisonForgeError, OSError, ValueError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
