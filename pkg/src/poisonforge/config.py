"""Flat dotted-key run configuration with a strict schema.

A config file is plain text, one ``key = value`` per line; ``#`` starts a
comment. Every key belongs to a module namespace (``data``, ``generator``,
``train``, ``at``, ...). Unknown keys and malformed values raise
:class:`~poisonforge.errors.ConfigError` naming the key and module.

Values are layered: schema defaults, then the config file, then environment
variables ``POISONFORGE_<KEY>`` (the dotted key upper-cased with dots turned
into underscores, e.g. ``POISONFORGE_AT_STEPS``), then explicit overrides.
A value of ``none`` keeps a key unset, which for ``train.*`` and
``generator.*`` means "use the method or generator default".
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import replace

from . import augment as aug
from .adversary import Guide, PGDConfig
from .data import Norm, PerturbationBudget
from .errors import ConfigError
from .experiments import DEFENSES, ToySpec
from .losses import LossWeights
from .poisons import DEFAULT_BUDGETS, DEFAULT_PARAMS, Generator, GeneratorConfig
from .trainer import ProbeConfig

__all__ = ["SCHEMA", "RunConfig", "load_config", "parse_text", "env_name"]

ENV_PREFIX = "POISONFORGE_"
GENERATORS = [g.value for g in Generator]

# key -> (type, default); type is int/float/bool/str/list or a tuple of allowed choices
SCHEMA = {
    "run.seed": (int, 0),
    "data.source": (("toy", "container", "cifar"), "toy"),
    "data.path": (str, None),
    "data.test_path": (str, None),
    "data.num_classes": (int, 4),
    "data.per_class": (int, 50),
    "data.test_per_class": (int, 50),
    "data.image_size": (int, 16),
    "generator.name": (tuple(GENERATORS), "UE"),
    "generator.epsilon": (float, None),
    "generator.surrogate_arch": (("TinyConvNet", "MLP"), "TinyConvNet"),
    "train.method": (tuple(DEFENSES), "VESPR"),
    "train.epochs": (int, None),
    "train.batch_size": (int, None),
    "train.base_lr": (float, None),
    "train.lr_schedule": (("Cosine", "Step"), None),
    "train.warmup_epochs": (int, None),
    "train.weight_decay": (float, None),
    "train.momentum": (float, None),
    "train.ssl_method": (("SimCLR", "MoCo", "SimSiam", "BYOL"), None),
    "train.arch": (("TinyConvNet", "MLP"), None),
    "train.rep_dim": (int, None),
    "train.proj_dim": (int, None),
    "train.width": (int, None),
    "train.projector_layers": (int, None),
    "train.cutout_size": (int, None),
    "train.mix_alpha": (float, None),
    "train.noise_sigma": (float, None),
    "train.noise_prob": (float, None),
    "train.ema": (float, None),
    "augment.policy": (("default", "identity", "pretrain", "sl", "linprobe"), "default"),
    "augment.crop_scale_min": (float, None),
    "loss.alpha": (float, 0.5),
    "loss.beta": (float, 0.5),
    "loss.temperature": (float, 0.2),
    "at.epsilon": (float, 4 / 255),
    "at.step_size": (float, 0.6 / 255),
    "at.steps": (int, 10),
    "at.random_start": (bool, True),
    "at.restarts": (int, 0),
    "at.guide": (tuple(g.value for g in Guide), None),
    "probe.epochs": (int, 20),
    "probe.batch_size": (int, 64),
    "probe.base_lr": (float, 10.0),
    "analysis.radius": (float, 8 / 255),
    "analysis.est_steps": (int, 10),
    "analysis.lip_samples": (int, None),
    "analysis.knn_k": (int, 20),
    "analysis.knn_pool": (int, None),
    "bench.generators": (list, GENERATORS),
    "bench.methods": (list, ["SL", "SSL", "VESPR"]),
    "bench.include_clean": (bool, False),
}

# generator-specific parameters, exposed as generator.<param>
_PARAM_TYPES = {}
for _g, _params in DEFAULT_PARAMS.items():
    for _name, _default in _params.items():
        if isinstance(_default, bool):
            _type = bool
        elif _default is None or isinstance(_default, int):
            _type = int
        else:
            _type = float
        _PARAM_TYPES.setdefault(_name, _type)
for _name, _type in sorted(_PARAM_TYPES.items()):
    SCHEMA[f"generator.{_name}"] = (_type, None)

# train.* keys that map one-to-one onto TrainConfig fields
_TRAIN_FIELDS = [k.split(".", 1)[1] for k in SCHEMA if k.startswith("train.") and k != "train.method"]
_VESPR_BY_GUIDE = {"CE": "VESPR", "Contrastive": "VESPR_SSL", "Combined": "VESPR_BOTH"}


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def _module(key):
    return key.split(".", 1)[0]


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(key, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}", key=key, module=_module(key))
    kind, _ = SCHEMA[key]
    text = str(raw).strip()
    if text.lower() == "none":
        return None
    try:
        if isinstance(kind, tuple):
            lookup = {c.lower(): c for c in kind}
            if text.lower() not in lookup:
                raise ValueError(f"expected one of {', '.join(kind)}")
            return lookup[text.lower()]
        if kind is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError("expected true or false")
        if kind is list:
            return [t.strip() for t in text.split(",") if t.strip()]
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {key!r}: {exc}", key=key, module=_module(key)) from None


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a dict of typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", key=line, module="config")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(key, value)
    return out


class RunConfig:
    """A fully resolved run configuration (every schema key has a value)."""

    def __init__(self, values: dict | None = None):
        self.values = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in SCHEMA.items()}
        for key, value in (values or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}", key=key, module=_module(key))
            self.values[key] = value
        self._check()

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key=key, module=_module(key))
        return self.values[key]

    def updated(self, values: dict) -> "RunConfig":
        return RunConfig({**self.values, **values})

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, list) else v) for k, v in sorted(self.values.items())}

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def _check(self):
        v = self.values
        for key in ("bench.generators",):
            for g in v[key]:
                if g not in GENERATORS:
                    raise ConfigError(f"{key}: unknown generator {g!r}", key=key, module="bench")
        for m in v["bench.methods"]:
            if m not in DEFENSES:
                raise ConfigError(f"bench.methods: unknown method {m!r}", key="bench.methods", module="bench")
        guide = v["at.guide"]
        if guide is not None and not v["train.method"].startswith("VESPR"):
            raise ConfigError("at.guide only selects the VESPR variant; unset it for other methods",
                              key="at.guide", module="at")
        gen = Generator(v["generator.name"])
        for name in _PARAM_TYPES:
            key = f"generator.{name}"
            if v[key] is not None and name not in DEFAULT_PARAMS[gen]:
                raise ConfigError(f"{key} does not apply to generator {gen.value}", key=key, module="generator")
        for key in ("data.path",):
            if v["data.source"] != "toy" and not v[key]:
                raise ConfigError(f"{key} is required when data.source is {v['data.source']}", key=key, module="data")

    # ---- views onto module configs

    def method(self) -> str:
        m = self.values["train.method"]
        guide = self.values["at.guide"]
        return _VESPR_BY_GUIDE[guide] if guide is not None and m.startswith("VESPR") else m

    def toy_spec(self) -> ToySpec:
        v = self.values
        return ToySpec(v["data.num_classes"], v["data.per_class"], v["data.test_per_class"], v["data.image_size"])

    def generator_config(self, seed: int) -> GeneratorConfig:
        v = self.values
        gen = Generator(v["generator.name"])
        budget = None
        if v["generator.epsilon"] is not None:
            base = DEFAULT_BUDGETS[gen]
            if base.norm != Norm.LINF:
                raise ConfigError(f"generator.epsilon does not apply to {gen.value}", key="generator.epsilon",
                                  module="generator")
            budget = PerturbationBudget(Norm.LINF, v["generator.epsilon"])
        params = {n: v[f"generator.{n}"] for n in DEFAULT_PARAMS[gen] if v[f"generator.{n}"] is not None}
        try:
            return GeneratorConfig(gen, budget, v["generator.surrogate_arch"], params, seed)
        except ValueError as exc:
            raise ConfigError(str(exc), key="generator.name", module="generator") from None

    def train_overrides(self, seed: int | None = None) -> dict:
        """Keyword overrides for the trainer (unset keys keep method defaults)."""
        v = self.values
        out = {f: v[f"train.{f}"] for f in _TRAIN_FIELDS if v[f"train.{f}"] is not None}
        try:
            out["weights"] = LossWeights(v["loss.alpha"], v["loss.beta"], v["loss.temperature"])
            out["pgd"] = PGDConfig(v["at.epsilon"], v["at.step_size"], v["at.steps"], v["at.random_start"],
                                   v["at.restarts"])
        except ValueError as exc:
            key = "loss.alpha" if "weight" in str(exc) or "temperature" in str(exc) else "at.epsilon"
            raise ConfigError(str(exc), key=key, module=_module(key)) from None
        policy = v["augment.policy"]
        if policy != "default" or v["augment.crop_scale_min"] is not None:
            out["augment"] = self._policy(policy)
        if seed is not None:
            out["seed"] = seed
        return out

    def _policy(self, name):
        lo = self.values["augment.crop_scale_min"]
        if name == "default":
            name = "sl" if self.method() in ("SL", "SL_AT") else "pretrain"
        if name == "identity":
            return aug.identity_policy()
        if name == "sl":
            return aug.sl_policy()
        fn = aug.pretrain_policy if name == "pretrain" else aug.linprobe_policy
        policy = fn()
        return policy if lo is None else replace(policy, crop_scale=(lo, 1.0))

    def probe_config(self, seed: int) -> ProbeConfig:
        v = self.values
        return ProbeConfig(epochs=v["probe.epochs"], batch_size=v["probe.batch_size"], base_lr=v["probe.base_lr"], seed=seed)

    def analysis_kwargs(self) -> dict:
        v = self.values
        return {"radius": v["analysis.radius"], "est_steps": v["analysis.est_steps"], "lip_samples": v["analysis.lip_samples"]}


def load_config(path=None, *, env=None, overrides=None) -> RunConfig:
    """Defaults < file at ``path`` < ``POISONFORGE_*`` environment < ``overrides``.

    ``overrides`` maps dotted keys to raw strings or typed values.
    """
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_text(fh.read(), str(path)))
    env = os.environ if env is None else env
    by_env = {env_name(k): k for k in SCHEMA}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in by_env:
            guess = name[len(ENV_PREFIX):].lower().replace("_", ".", 1)
            raise ConfigError(f"unknown config key {guess!r} (from environment variable {name})", key=guess,
                              module=_module(guess))
        values[by_env[name]] = _parse_value(by_env[name], raw)
    for key, raw in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key=key, module=_module(key))
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    return RunConfig(values)
