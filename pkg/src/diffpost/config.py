"""Versioned run configuration.

A run config is a YAML document mapped onto nested dataclasses. Every field
has a default, unknown keys are rejected, and the config digest (sha256 of
the canonical JSON form, output directory excluded) is embedded in every
artifact a run writes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .model import ConfigError, ModelConfig

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "DIFFPOST_OUTPUT_ROOT"


@dataclass(frozen=True)
class TaskSection:
    kind: str = "countdown_lite"
    params: dict = field(default_factory=dict)
    n_train: int = 2000        # SFT corpus size
    n_heldout: int = 200       # evaluation split
    pool: int = 64             # RL prompt pool


@dataclass(frozen=True)
class PlanSection:
    steps: int = 0             # 0: one token per step
    selection: str = "top_confidence"
    temperature: float = 1.0   # rollout temperature
    eval_temperature: float = 0.0
    gen_len: int = 0           # 0: the task's response length
    block_len: int = 32


@dataclass(frozen=True)
class EstimatorSection:
    kind: str = "one_step"
    mc_samples: int = 16
    fixed_t: float | None = None
    weighted: bool = False


@dataclass(frozen=True)
class RLSection:
    group_size: int = 8
    prompts_per_step: int = 4
    steps: int = 200
    lr: float = 1e-4
    clip_eps: float = 0.2
    kl_coef: float = 0.0
    ratio_level: str = "sequence"
    shared_noise: bool = True
    eps_std: float = 1e-6
    clip_grad: float = 1.0
    probe_reps: int = 4
    workers: int = 0


@dataclass(frozen=True)
class SFTSection:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    clip_grad: float = 1.0


@dataclass(frozen=True)
class DPOSection:
    beta: float = 0.5
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    n_pairs: int = 512
    n_heldout: int = 128
    pairs_file: str = ""


@dataclass(frozen=True)
class ScheduleSection:
    checkpoint_every: int = 50
    eval_every: int = 0


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = ""
    init_checkpoint: str = ""
    model: ModelConfig = field(default_factory=lambda: ModelConfig(block_len=32))
    task: TaskSection = field(default_factory=TaskSection)
    plan: PlanSection = field(default_factory=PlanSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    rl: RLSection = field(default_factory=RLSection)
    sft: SFTSection = field(default_factory=SFTSection)
    dpo: DPOSection = field(default_factory=DPOSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def resolved_output_dir(self, command: str) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        return root / f"{command}-{self.digest()[:12]}"


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            if isinstance(value, dict) and f.default_factory is not dataclasses.MISSING:
                value = {**asdict(f.default_factory()), **value}   # keep section defaults
            kwargs[name] = _build(sub, value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(f, value, f"{path}{name}")
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _coerce(f: dataclasses.Field, value, where: str):
    """Light type check against the field's default (or, for optional
    fields, the annotation)."""
    default = f.default if f.default is not dataclasses.MISSING else None
    if default is None and f.default_factory is not dataclasses.MISSING:
        default = f.default_factory()
    if default is None and str(f.type).startswith("float"):
        default = 0.0
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
    elif isinstance(default, float):
        if isinstance(value, str):
            # PyYAML reads exponent forms such as 1e-4 as strings
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
    return value


_SECTIONS = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "task"): TaskSection,
    (RunConfig, "plan"): PlanSection,
    (RunConfig, "estimator"): EstimatorSection,
    (RunConfig, "rl"): RLSection,
    (RunConfig, "sft"): SFTSection,
    (RunConfig, "dpo"): DPOSection,
    (RunConfig, "schedule"): ScheduleSection,
}


def from_dict(data: dict) -> RunConfig:
    try:
        return _build(RunConfig, data, "")
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                base: dict | None = None) -> RunConfig:
    data = dict(base or {})
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        data = _merge(data, loaded)
    return from_dict(apply_overrides(data, overrides or []))


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


PRESETS = {
    # long-form protocol values; they configure generation geometry only
    "planning": {"plan": {"gen_len": 256, "steps": 128}},
    "math": {"plan": {"gen_len": 512, "steps": 256}, "model": {"max_len": 1024}},
}


def preset(name: str, overrides: list[str] | None = None) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return from_dict(apply_overrides(PRESETS[name], overrides or []))
