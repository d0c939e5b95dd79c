"""Experiment configuration: YAML schema, defaults, validation, ablation axes.

Schema (every key optional except ``task``)::

    task: copy                 # copy | reverse | modadd
    seed: 0                    # model init; also the data seed unless data.seed is set
    train_steps: 1000
    eval_every: 250
    batch_size: 16
    eval_batch_size: 32
    checkpoint_every: 0        # 0 = only the final checkpoint
    output_dir: runs/default
    data:    {num_symbols, prompt_len, train_size, eval_size, seed}
    model:   ModelConfig fields except vocab_size / max_seq_len (derived
             from data) and seed (top-level), with ``grouping`` a mapping of
             {kind, num_groups, sizes, block_starts, seed, mode, random_per_batch}
    optim:   {lr, min_lr_ratio, warmup_steps, beta1, beta2, eps, weight_decay, grad_clip}
    ablation: {axis, values}   # axis in group_count | strategy | reward | layer_scope | group_parity

Unknown keys anywhere are rejected with their dotted path.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import TaskSpec
from .grouping import GroupingStrategy
from .losses import default_rewards
from .model import ModelConfig
from .training import OptimConfig

ABLATION_AXES = ("group_count", "strategy", "reward", "layer_scope", "group_parity")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the key path."""


@dataclass
class DataConfig:
    num_symbols: int = 16
    prompt_len: int = 8
    train_size: int = 8192
    eval_size: int = 256
    seed: int | None = None


@dataclass
class AblationConfig:
    axis: str
    values: list


@dataclass
class ExperimentConfig:
    model: ModelConfig
    task: str = "copy"
    seed: int = 0
    train_steps: int = 1000
    eval_every: int = 250
    batch_size: int = 16
    eval_batch_size: int = 32
    checkpoint_every: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ablation: AblationConfig | None = None

    @property
    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task, self.data.num_symbols, self.data.prompt_len)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TOP_KEYS = {"task", "seed", "train_steps", "eval_every", "batch_size", "eval_batch_size",
             "checkpoint_every", "output_dir", "data", "model", "optim", "ablation"}
_GROUPING_KEYS = {"kind", "num_groups", "sizes", "block_starts", "seed", "mode", "random_per_batch"}
_MODEL_EXCLUDED = {"vocab_size", "max_seq_len", "seed", "grouping"}
_OPTIM_EXCLUDED = {"total_steps"}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section: dict, allowed: set[str], path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(section).__name__}")
    extra = sorted(set(section) - allowed)
    if extra:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{extra[0]}" + (f" (and {len(extra) - 1} more)" if len(extra) > 1 else ""))


def _build(cls, raw: dict, path: str, **extra):
    try:
        return cls(**raw, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw or {})
    _reject_unknown(raw, _TOP_KEYS, "")
    if "task" not in raw:
        raise ConfigError("task: required key missing")
    data_raw = raw.pop("data", {}) or {}
    _reject_unknown(data_raw, _field_names(DataConfig), "data")
    data = _build(DataConfig, data_raw, "data")
    task = raw.get("task")
    try:
        spec = TaskSpec(task, data.num_symbols, data.prompt_len)
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from exc

    model_raw = raw.pop("model", {}) or {}
    _reject_unknown(model_raw, _field_names(ModelConfig) - {"vocab_size", "max_seq_len", "seed"}, "model")
    grouping_raw = model_raw.pop("grouping", {}) or {}
    _reject_unknown(grouping_raw, _GROUPING_KEYS, "model.grouping")
    top_k = model_raw.get("top_k", 2)
    grouping_raw.setdefault("num_groups", 3)
    grouping = _build(GroupingStrategy, grouping_raw, "model.grouping", group_size=top_k)
    if "rewards" not in model_raw or model_raw["rewards"] is None:
        model_raw["rewards"] = default_rewards(grouping.num_groups)
    seed = raw.get("seed", 0)
    model = _build(ModelConfig, model_raw, "model", grouping=grouping, vocab_size=spec.vocab_size,
                   max_seq_len=spec.seq_len, seed=seed)

    optim_raw = raw.pop("optim", {}) or {}
    _reject_unknown(optim_raw, _field_names(OptimConfig) - _OPTIM_EXCLUDED, "optim")
    steps = raw.get("train_steps", 1000)
    optim = _build(OptimConfig, optim_raw, "optim", total_steps=steps)

    ablation = None
    abl_raw = raw.pop("ablation", None)
    if abl_raw is not None:
        _reject_unknown(abl_raw, {"axis", "values"}, "ablation")
        ablation = _build(AblationConfig, abl_raw, "ablation")

    cfg = _build(ExperimentConfig, raw, "<root>", model=model, data=data, optim=optim, ablation=ablation)
    for name in ("train_steps", "eval_every", "batch_size", "eval_batch_size", "checkpoint_every"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or value < (0 if name == "checkpoint_every" else 1):
            raise ConfigError(f"{name}: must be a positive integer, got {value!r}")
    if ablation is not None:
        for v in ablation.values:
            sweep_value(cfg, ablation.axis, v)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return from_dict(raw or {})


def to_raw(cfg: ExperimentConfig) -> dict:
    """Inverse of ``from_dict``: the resolved config as a plain mapping."""
    d = cfg.to_dict()
    model = d["model"]
    for k in ("vocab_size", "max_seq_len", "seed"):
        model.pop(k)
    model["grouping"].pop("group_size")
    d["optim"].pop("total_steps")
    if d["ablation"] is None:
        d.pop("ablation")
    return d


def apply_overrides(cfg: ExperimentConfig, seed: int | None = None, steps: int | None = None,
                    out: str | None = None) -> ExperimentConfig:
    raw = to_raw(cfg)
    if seed is not None:
        raw["seed"] = seed
    if steps is not None:
        raw["train_steps"] = steps
    if out is not None:
        raw["output_dir"] = out
    return from_dict(raw)


def sweep_value(cfg: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    """Copy of ``cfg`` with one ablation axis set to ``value`` (ablation removed)."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablation.axis: unknown axis {axis!r}; expected one of {ABLATION_AXES}")
    raw = to_raw(cfg)
    raw.pop("ablation", None)
    m = raw["model"]
    g = m["grouping"]
    K = m["top_k"]
    if axis == "group_count":
        C = int(value)
        g["num_groups"] = C
        g["sizes"] = None
        g["block_starts"] = None
        m["rewards"] = default_rewards(C)
        if C * K > m["num_experts"]:
            raise ConfigError(f"ablation.values: C·K exceeds n ({C}·{K} > {m['num_experts']})")
    elif axis == "strategy":
        if value not in ("uniform", "high_only", "random"):
            raise ConfigError(f"ablation.values: strategy {value!r} not in uniform/high_only/random")
        g["kind"] = value
        g["sizes"] = None
        g["block_starts"] = None
    elif axis == "reward":
        m["rewards"] = [float(r) for r in value]
    elif axis == "layer_scope":
        m["layer_scope"] = value
    elif axis == "group_parity":
        if value == "even":
            g["kind"] = "uniform"
            g["sizes"] = None
        elif value == "uneven":
            g["kind"] = "uneven"
            g["sizes"] = [K] + [max(1, K // 2)] * (g["num_groups"] - 1)
        else:
            raise ConfigError(f"ablation.values: parity {value!r} not in even/uneven")
        g["block_starts"] = None
    try:
        return from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"ablation.values[{value!r}]: {exc}") from exc


def axis_fields(axis: str) -> set[str]:
    """Dotted config paths an ablation axis is allowed to change."""
    return {
        "group_count": {"model.grouping.num_groups", "model.grouping.sizes", "model.grouping.block_starts",
                        "model.rewards"},
        "strategy": {"model.grouping.kind", "model.grouping.sizes", "model.grouping.block_starts"},
        "reward": {"model.rewards"},
        "layer_scope": {"model.layer_scope"},
        "group_parity": {"model.grouping.kind", "model.grouping.sizes", "model.grouping.block_starts"},
    }[axis]


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out
