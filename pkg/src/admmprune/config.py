"""Declarative run configuration.

Config files are plain text, one ``dotted.key = value`` pair per line, ``#``
comments allowed. The same dotted keys are accepted as ``--set KEY=VALUE``
overrides. Every run needs an explicit seed; there is no silent default.

    pipeline = single_shot
    seed = 7
    arch.name = toy
    data.name = synthetic
    criterion = admm
    prune.rate = 0.5

Lists are comma-separated (``prune.rates = 0.5,0.5``). ``admm.update_interval``
is an integer number of minibatch steps or the word ``epoch``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields as dc_fields

from .errors import ConfigError

_MISSING = object()


@dataclass(frozen=True)
class _Field:
    kind: str                # int | float | bool | str | float_list | int_list | interval
    default: object = _MISSING
    choices: tuple | None = None


SCHEMA = {
    "pipeline": _Field("str", "single_shot", ("single_shot", "iterative_te")),
    "seed": _Field("int"),  # required: all randomness flows from it
    "run_id": _Field("str", ""),
    "criterion": _Field("str", "admm", ("admm", "admm_weight", "min_weight",
                                        "mean_activation", "taylor", "random")),
    "arch.name": _Field("str", "toy", ("toy", "lenet5", "alexnet")),
    "arch.conv_filters": _Field("int_list", ()),
    "arch.n_classes": _Field("int", 0),  # 0 = architecture default
    "data.name": _Field("str", "synthetic", ("synthetic", "mnist", "cifar10")),
    "data.root": _Field("str", ""),
    "data.subset_fraction": _Field("float", 1.0),
    "data.n_per_class": _Field("int", 300),
    "data.difficulty": _Field("float", 0.8),
    "train.lr": _Field("float", 1e-4),
    "train.weight_decay": _Field("float", 5e-4),
    "train.batch_size": _Field("int", 64),
    "train.epochs_pretrain": _Field("int", 10),
    "train.epochs_admm": _Field("int", 60),
    "train.epochs_finetune": _Field("int", 100),
    "train.admm_from_scratch": _Field("bool", False),
    "train.eval_batch_size": _Field("int", 256),
    "prune.rate": _Field("float", 0.5),
    "prune.rates": _Field("float_list", ()),
    "admm.rho": _Field("float", 1e-2),
    "admm.eps_per_element": _Field("float", 1e-3),
    "admm.epsilon": _Field("float", 0.0),  # 0 = use eps_per_element scaling
    "admm.norm": _Field("str", "l1", ("l1", "l2")),
    "admm.update_interval": _Field("interval", "epoch"),
    "admm.exit_mode": _Field("str", "both", ("both", "either")),
    "admm.early_exit": _Field("bool", True),
    "stats.batches": _Field("int", 10),
    "stats.batch_size": _Field("int", 50),
    "iterative.filters_per_round": _Field("int", 10),
    "iterative.updates_per_round": _Field("int", 500),
    "iterative.batch_size": _Field("int", 50),
    "iterative.extra_finetune": _Field("bool", False),
}


def _parse_value(key: str, raw: str):
    f = SCHEMA[key]
    raw = raw.strip()
    try:
        if f.kind == "int":
            return int(raw)
        if f.kind == "float":
            return float(raw)
        if f.kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if f.kind == "int_list":
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
        if f.kind == "float_list":
            return tuple(float(v) for v in raw.split(",") if v.strip()) if raw else ()
        if f.kind == "interval":
            return "epoch" if raw == "epoch" else int(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {f.kind}") from e
    value = raw
    if f.choices and value not in f.choices:
        raise ConfigError(f"{key}: {value!r} not one of {f.choices}")
    return value


def parse_config_text(text: str) -> dict:
    """Parse dotted key=value lines into a raw {key: value} mapping."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def apply_overrides(values: dict, overrides) -> dict:
    """Apply repeatable KEY=VALUE override strings on top of parsed values."""
    out = dict(values)
    for ov in overrides or ():
        if "=" not in ov:
            raise ConfigError(f"override {ov!r}: expected KEY=VALUE")
        key, _, raw = ov.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"override references unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


# --------------------------------------------------------------- typed view

@dataclass(frozen=True)
class ArchConfig:
    name: str
    conv_filters: tuple
    n_classes: int


@dataclass(frozen=True)
class DataConfig:
    name: str
    root: str
    subset_fraction: float
    n_per_class: int
    difficulty: float


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    weight_decay: float
    batch_size: int
    epochs_pretrain: int
    epochs_admm: int
    epochs_finetune: int
    admm_from_scratch: bool
    eval_batch_size: int


@dataclass(frozen=True)
class PruneConfig:
    rate: float
    rates: tuple


@dataclass(frozen=True)
class AdmmConfig:
    rho: float
    eps_per_element: float
    epsilon: float
    norm: str
    update_interval: object
    exit_mode: str
    early_exit: bool


@dataclass(frozen=True)
class StatsConfig:
    batches: int
    batch_size: int


@dataclass(frozen=True)
class IterativeConfig:
    filters_per_round: int
    updates_per_round: int
    batch_size: int
    extra_finetune: bool


@dataclass(frozen=True)
class RunConfig:
    pipeline: str
    seed: int
    run_id: str
    criterion: str
    arch: ArchConfig
    data: DataConfig
    train: TrainConfig
    prune: PruneConfig
    admm: AdmmConfig
    stats: StatsConfig
    iterative: IterativeConfig | None

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        rate = int(round(self.prune.rate * 1000))
        return (f"{self.arch.name}-{self.data.name}-{self.pipeline}-"
                f"{self.criterion}-r{rate}-s{self.seed}")

    def uses_admm(self) -> bool:
        return self.pipeline == "single_shot" and self.criterion in ("admm", "admm_weight")

    def data_root(self) -> str:
        return self.data.root or os.environ.get("ADMMPRUNE_DATA_ROOT", "data")

    def to_dotted(self) -> dict:
        """Resolved flat view, one entry per schema key."""
        out = {}
        for key in SCHEMA:
            head, _, tail = key.partition(".")
            if not tail:
                out[key] = getattr(self, head)
            elif head == "iterative":
                it = self.iterative or _iterative_defaults()
                out[key] = getattr(it, tail)
            else:
                out[key] = getattr(getattr(self, head), tail)
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dotted().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _iterative_defaults() -> IterativeConfig:
    return IterativeConfig(
        filters_per_round=SCHEMA["iterative.filters_per_round"].default,
        updates_per_round=SCHEMA["iterative.updates_per_round"].default,
        batch_size=SCHEMA["iterative.batch_size"].default,
        extra_finetune=SCHEMA["iterative.extra_finetune"].default,
    )


def _section(values: dict, cls, prefix: str):
    kwargs = {}
    for f in dc_fields(cls):
        key = f"{prefix}.{f.name}"
        field = SCHEMA[key]
        if key in values:
            kwargs[f.name] = values[key]
        elif field.default is _MISSING:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            kwargs[f.name] = field.default
    return cls(**kwargs)


def build_run_config(values: dict) -> RunConfig:
    """Validate a raw mapping and assemble the typed RunConfig."""
    unknown = set(values) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in values:
        raise ConfigError("config must set an explicit seed (all randomness flows from it)")
    pipeline = values.get("pipeline", SCHEMA["pipeline"].default)
    iterative_keys = [k for k in values if k.startswith("iterative.")]
    if pipeline != "iterative_te" and iterative_keys:
        raise ConfigError(
            f"iterative.* keys {sorted(iterative_keys)} are only valid for "
            f"pipeline = iterative_te")
    cfg = RunConfig(
        pipeline=pipeline,
        seed=values["seed"],
        run_id=values.get("run_id", ""),
        criterion=values.get("criterion", SCHEMA["criterion"].default),
        arch=_section(values, ArchConfig, "arch"),
        data=_section(values, DataConfig, "data"),
        train=_section(values, TrainConfig, "train"),
        prune=_section(values, PruneConfig, "prune"),
        admm=_section(values, AdmmConfig, "admm"),
        stats=_section(values, StatsConfig, "stats"),
        iterative=_section(values, IterativeConfig, "iterative")
        if pipeline == "iterative_te" else None,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    problems = []
    if cfg.seed < 0:
        problems.append("seed must be >= 0")
    if cfg.train.lr <= 0:
        problems.append("train.lr must be > 0")
    if cfg.train.batch_size < 1:
        problems.append("train.batch_size must be >= 1")
    if not (0.0 < cfg.data.subset_fraction <= 1.0):
        problems.append("data.subset_fraction must be in (0, 1]")
    if not (0.0 <= cfg.prune.rate < 1.0):
        problems.append("prune.rate must be in [0, 1)")
    for r in cfg.prune.rates:
        if not (0.0 <= r < 1.0):
            problems.append(f"prune.rates entry {r} not in [0, 1)")
    if cfg.admm.rho <= 0:
        problems.append("admm.rho must be > 0")
    if cfg.admm.eps_per_element <= 0:
        problems.append("admm.eps_per_element must be > 0")
    if cfg.admm.epsilon < 0:
        problems.append("admm.epsilon must be >= 0")
    if isinstance(cfg.admm.update_interval, int) and cfg.admm.update_interval < 1:
        problems.append("admm.update_interval must be >= 1 (or 'epoch')")
    for name in ("epochs_pretrain", "epochs_admm", "epochs_finetune"):
        if getattr(cfg.train, name) < 0:
            problems.append(f"train.{name} must be >= 0")
    if cfg.iterative is not None:
        if cfg.iterative.filters_per_round < 1:
            problems.append("iterative.filters_per_round must be >= 1")
        if cfg.iterative.updates_per_round < 0:
            problems.append("iterative.updates_per_round must be >= 0")
        if cfg.iterative.batch_size < 1:
            problems.append("iterative.batch_size must be >= 1")
        if cfg.criterion != "taylor":
            problems.append("pipeline iterative_te requires criterion = taylor")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))


def load_config(path_or_text: str, overrides=None, is_text: bool = False) -> RunConfig:
    """Parse a config file (or literal text) plus overrides into a RunConfig."""
    text = path_or_text if is_text else open(path_or_text, encoding="utf-8").read()
    values = apply_overrides(parse_config_text(text), overrides)
    return build_run_config(values)
