"""Run configuration: one YAML tree, environment overrides, then command-line overrides.

Precedence (later wins): built-in defaults, config file, ``STEERCOT_<SECTION>__<KEY>``
environment variables, ``--set section.key=value`` flags, and the dedicated
``--seed`` / ``--workers`` flags. Values from the environment and ``--set`` are
parsed as YAML scalars, so ``STEERCOT_PROBE__KS="[1, 2]"`` sets a list.
"""

from __future__ import annotations

import os
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import SchemaError

SCHEMA_VERSION = 1
ENV_PREFIX = "STEERCOT_"


@dataclass(frozen=True)
class TaskSection:
    count: int = 2000
    min_operands: int = 2
    max_operands: int = 3
    max_operand: int = 9
    max_value: int = 30


@dataclass(frozen=True)
class ModelSection:
    num_layers: int = 8
    model_dim: int = 64
    num_heads: int = 4
    max_context: int = 128


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 1000
    learning_rate: float = 5e-3
    batch_size: int = 64
    warmup_steps: int = 100
    grad_clip: float = 1.0
    gate: float = 0.9
    gate_items: int = 100
    enforce_gate: bool = True


@dataclass(frozen=True)
class DirectionSection:
    pairs: int = 256
    n_components: int = 2
    tau_sep: float = 0.5
    tau_ang: float = 0.05
    persist: int = 3


@dataclass(frozen=True)
class ProbeSection:
    pilot_size: int = 64
    ks: tuple[int, ...] = (1, 2, 3, 4)
    alphas: tuple[float, ...] = (-0.1, -0.2, -0.3, -0.4, -0.5, -0.8, -1.0)
    scope: str = "all"  # the style is fixed by the first answer token, predicted at the last prompt position
    target_low: float = 0.3
    target_high: float = 0.9
    max_collapse_frac: float = 0.1
    min_alphas: int = 3
    max_new: int = 80


@dataclass(frozen=True)
class SampleSection:
    size: int = 800
    num_alphas: int = 3
    temperature: float = 0.0
    verify: str = "consistency"  # consistency | answer
    max_new: int = 80


@dataclass(frozen=True)
class CurriculumSection:
    budget: int = 256
    steps_per_stage: int = 40
    learning_rate: float = 5e-4
    batch_size: int = 32
    eval_every: int = 20
    rank: int = 8
    adapter_alpha: float = 16.0
    system2_ratio: float = 1.0
    aes_floor: float | None = None
    restart_each_stage: bool = False
    validation_size: int = 100
    max_new: int = 80


@dataclass(frozen=True)
class EvalSection:
    repeats: int = 1
    temperature: float = 0.0
    test_size: int = 300
    max_new: int = 80
    ablation: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 0  # 0 means the logical core count
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    directions: DirectionSection = field(default_factory=DirectionSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    sample: SampleSection = field(default_factory=SampleSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def num_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


_SECTIONS = {f.name for f in fields(RunConfig) if f.default_factory is not MISSING}


def _coerce(cls, name: str, value: Any):
    default = getattr(cls(), name)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise SchemaError(f"{cls.__name__}.{name} must be a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise SchemaError(f"{cls.__name__}.{name} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{cls.__name__}.{name} must be an integer")
        return value
    if isinstance(default, float) or (default is None and name == "aes_floor"):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{cls.__name__}.{name} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise SchemaError(f"{cls.__name__}.{name} must be a string")
    return value


def _apply(cfg: RunConfig, tree: Mapping) -> RunConfig:
    updates: dict[str, Any] = {}
    for key, value in tree.items():
        if key == "schema_version":
            if value != SCHEMA_VERSION:
                raise SchemaError(f"unsupported config schema_version {value!r}")
            continue
        if key in ("seed", "workers"):
            updates[key] = _coerce(RunConfig, key, value)
        elif key in _SECTIONS:
            if not isinstance(value, Mapping):
                raise SchemaError(f"config section {key!r} must be a mapping")
            section = getattr(cfg, key)
            known = {f.name for f in fields(section)}
            unknown = set(value) - known
            if unknown:
                raise SchemaError(f"unknown keys in section {key!r}: {sorted(unknown)}")
            updates[key] = replace(section, **{k: _coerce(type(section), k, v) for k, v in value.items()})
        else:
            raise SchemaError(f"unknown config key {key!r}")
    return replace(cfg, **updates)


def _dotted(assignments: Mapping[str, Any]) -> dict:
    tree: dict = {}
    for path, value in assignments.items():
        parts = path.split(".")
        if len(parts) == 1:
            tree[parts[0]] = value
        elif len(parts) == 2:
            tree.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise SchemaError(f"override {path!r} must be 'key' or 'section.key'")
    return tree


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            out[key] = yaml.safe_load(raw)
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(tree, Mapping):
            raise SchemaError(f"{path}: top level must be a mapping")
        cfg = _apply(cfg, tree)
    cfg = _apply(cfg, _dotted(env_overrides(environ)))
    if overrides:
        cfg = _apply(cfg, _dotted(overrides))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    tree = cfg.to_dict()
    for section in tree.values():
        if isinstance(section, dict):
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
    return yaml.safe_dump(tree, sort_keys=False)
