"""Layered experiment configuration: common.yaml < method.yaml < --set overrides.

Configs are frozen dataclasses. Everything that must be identical across
methods (optimizer, schedule, augmentation, smoothing, weight averaging,
threat model) lives in the common layer; by default the method layer may
only touch the ``method`` section.
"""
import copy
import hashlib
import json
import types
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import yaml

from .methods import registry

DATASETS = ("cifar10", "cifar100", "tiny-imagenet", "synthetic")
ARCHS = ("resnet18", "preactresnet18", "tiny-cnn")
DEFAULT_VAL_SIZE = {"cifar10": 1000, "cifar100": 1000, "tiny-imagenet": 2000, "synthetic": 256}

# Keys the benchmark fixes for every method; surfaced in config.resolved.json.
ASSUMPTIONS = {
    "threat.epsilon": "8/255 Linf by default; not stated by the source benchmark",
    "threat.eval_step": "2/255 by default",
    "schedule.lr_max": "OneCycle peak learning rate",
    "wa_selection": "method.params.use_wa_model selects raw vs averaged weights for validation/eval",
    "val_split": "last val_size indices of a seed-0 permutation, shared across run seeds",
}


class ConfigError(ValueError):
    """Schema violation, unreadable file, or invalid layering."""


@dataclass(frozen=True)
class ThreatModel:
    norm: str = "linf"
    epsilon: float = 8 / 255
    eval_step: float = 2 / 255
    data_min: float = 0.0
    data_max: float = 1.0


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"
    lr_max: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "onecycle"
    epochs: int = 100
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4


@dataclass(frozen=True)
class EvalSpec:
    pgd_steps: Tuple[int, ...] = (10, 20, 50)
    apgd_iters: int = 100
    restarts: int = 1
    random_start: bool = True
    aa_lite: bool = True
    batch_size: int = 256
    max_examples: Optional[int] = None


@dataclass(frozen=True)
class MethodSpec:
    name: str = "pgd-at-wa"
    params: Mapping[str, Any] = field(default_factory=lambda: types.MappingProxyType({}))

    def __post_init__(self):
        if not isinstance(self.params, types.MappingProxyType):
            object.__setattr__(self, "params", types.MappingProxyType(dict(self.params)))

    def resolved(self) -> Dict[str, Any]:
        """Registry defaults overlaid with the explicit params."""
        return registry.resolve_params(self.name, dict(self.params))

    @property
    def use_wa_model(self) -> bool:
        return bool(self.resolved().get("use_wa_model", True))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_name: str = "cifar10"
    arch: str = "resnet18"
    width: float = 1.0
    method: MethodSpec = field(default_factory=MethodSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    batch_size: int = 128
    label_smoothing: float = 0.4
    wa_decay: float = 0.9995
    seed: int = 0
    threat: ThreatModel = field(default_factory=ThreatModel)
    eval: EvalSpec = field(default_factory=EvalSpec)
    val_size: Optional[int] = None
    train_subset: Optional[int] = None
    augment: bool = True
    deterministic: bool = False
    output_dir: str = "runs"

    def __post_init__(self):
        if self.val_size is None and self.dataset_name in DEFAULT_VAL_SIZE:
            object.__setattr__(self, "val_size", DEFAULT_VAL_SIZE[self.dataset_name])

    def to_dict(self) -> Dict[str, Any]:
        return to_dict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects results; explicit defaults hash like implicit ones."""
        d = self.to_dict()
        d.pop("output_dir")
        if self.method.name in registry.REGISTRY and not set(self.method.params) - set(
            registry.REGISTRY[self.method.name].defaults
        ):
            d["method"]["params"] = self.method.resolved()
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def run_dir(self, root: Optional[str] = None) -> Path:
        """Per-run artifact directory, unique per (output_dir, dataset, method, seed)."""
        base = Path(root if root is not None else self.output_dir)
        return base / self.dataset_name / self.method.name / f"seed{self.seed}"


def to_dict(obj) -> Any:
    if is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, Mapping):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# dict -> dataclass with strict schema checks

_NESTED = {
    "method": MethodSpec,
    "optimizer": OptimizerSpec,
    "schedule": ScheduleSpec,
    "threat": ThreatModel,
    "eval": EvalSpec,
}


def _coerce(key: str, value: Any, default: Any, annotation: str) -> Any:
    optional = "Optional" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: null not allowed")
    if isinstance(default, bool) or "bool" in annotation:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {type(value).__name__}")
        return value
    if "Tuple" in annotation:
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{key}: expected list of int")
        return tuple(value)
    if "int" in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {type(value).__name__}")
        return value
    if "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {type(value).__name__}")
        return float(value)
    if "str" in annotation:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {type(value).__name__}")
        return value
    return value


def _build(cls, data: Mapping[str, Any], prefix: str = ""):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key: {prefix}{unknown[0]}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        key = prefix + name
        if cls is ExperimentConfig and name in _NESTED:
            kwargs[name] = _build(_NESTED[name], value, key + ".")
        elif cls is MethodSpec and name == "params":
            if not isinstance(value, Mapping):
                raise ConfigError(f"{key}: expected a mapping")
            kwargs[name] = dict(value)
        else:
            ann = str(known[name].type)
            kwargs[name] = _coerce(key, value, getattr(defaults, name), ann)
    return cls(**kwargs)


def from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


# ---------------------------------------------------------------------------
# layering


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursive merge; override wins, lists are replaced wholesale."""
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> Dict[str, Any]:
    """``a.b.c=value`` -> {"a": {"b": {"c": value}}}; value parsed as YAML scalar."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has empty key")
    value = yaml.safe_load(raw) if raw.strip() else None
    node: Dict[str, Any] = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def read_yaml(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _flat_keys(d: Mapping[str, Any], prefix: str = "") -> List[str]:
    out = []
    for k, v in d.items():
        if isinstance(v, Mapping) and v:
            out += _flat_keys(v, f"{prefix}{k}.")
        else:
            out.append(prefix + k)
    return out


def load_layered(
    common_path,
    method_path,
    overrides: Iterable[str] = (),
    allow_method_overrides: bool = False,
) -> ExperimentConfig:
    """Merge common < method < overrides, validate, and freeze.

    The method layer is restricted to the ``method`` section unless
    ``allow_method_overrides`` is set, so standardized settings cannot
    drift per method.
    """
    common = read_yaml(common_path)
    method = read_yaml(method_path)
    if not allow_method_overrides:
        stray = [k for k in _flat_keys(method) if not k.startswith("method.") and k != "method"]
        if stray:
            raise ConfigError(
                f"standardized setting {stray[0]!r} may only be set in the common config"
            )
    merged = deep_merge(common, method)
    for item in overrides:
        merged = deep_merge(merged, parse_override(item))
    cfg = from_dict(merged)
    problems = validate(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def validate(cfg: ExperimentConfig) -> List[str]:
    """Return a list of invariant violations; empty means valid."""
    v = []

    def check(cond, key, msg):
        if not cond:
            v.append(f"{key}: {msg}")

    check(cfg.dataset_name in DATASETS, "dataset_name", f"must be one of {DATASETS}")
    check(cfg.arch in ARCHS, "arch", f"must be one of {ARCHS}")
    check(cfg.width > 0, "width", "must be > 0")
    check(cfg.batch_size > 0, "batch_size", "must be > 0")
    check(0.0 <= cfg.label_smoothing <= 1.0, "label_smoothing", "must lie in [0, 1]")
    check(0.0 <= cfg.wa_decay <= 1.0, "wa_decay", "must lie in [0, 1]")
    check(cfg.val_size is not None and cfg.val_size >= 0, "val_size", "must be >= 0")
    check(cfg.train_subset is None or cfg.train_subset > 0, "train_subset", "must be > 0")

    o = cfg.optimizer
    check(o.kind == "sgd", "optimizer.kind", "only 'sgd' is supported")
    check(o.lr_max > 0, "optimizer.lr_max", "must be > 0")
    check(0 <= o.momentum < 1, "optimizer.momentum", "must lie in [0, 1)")
    check(o.weight_decay >= 0, "optimizer.weight_decay", "must be >= 0")

    s = cfg.schedule
    check(s.kind == "onecycle", "schedule.kind", "only 'onecycle' is supported")
    check(s.epochs >= 0, "schedule.epochs", "must be >= 0")
    check(0 < s.pct_start < 1, "schedule.pct_start", "must lie in (0, 1)")
    check(s.div_factor > 0, "schedule.div_factor", "must be > 0")
    check(s.final_div_factor > 0, "schedule.final_div_factor", "must be > 0")

    t = cfg.threat
    check(t.norm == "linf", "threat.norm", "only 'linf' is supported")
    check(t.epsilon >= 0, "threat.epsilon", "must be >= 0")
    check(t.eval_step > 0, "threat.eval_step", "must be > 0")
    check(t.data_min < t.data_max, "threat.data_min", "must be < threat.data_max")

    e = cfg.eval
    check(all(k >= 0 for k in e.pgd_steps), "eval.pgd_steps", "must be >= 0")
    check(e.apgd_iters >= 1, "eval.apgd_iters", "must be >= 1")
    check(e.restarts >= 1, "eval.restarts", "must be >= 1")
    check(e.batch_size > 0, "eval.batch_size", "must be > 0")
    check(e.max_examples is None or e.max_examples > 0, "eval.max_examples", "must be > 0")

    name = cfg.method.name
    info = registry.REGISTRY.get(name)
    if info is None:
        v.append(f"method.name: method not in registry ({name!r})")
    elif not info.implemented:
        v.append(f"method.name: method not in registry ({name!r} is not implemented)")
    else:
        unknown = sorted(set(cfg.method.params) - set(info.defaults))
        if unknown:
            v.append(f"method.params: unknown param {unknown[0]!r} for {name}")
    return v


def save_resolved(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "method_params_resolved": cfg.method.resolved() if not validate(cfg) else None,
        "assumptions": ASSUMPTIONS,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def load_resolved(path) -> ExperimentConfig:
    data = json.loads(Path(path).read_text())
    return from_dict(data["config"] if "config" in data else data)


def packaged_config_dir() -> Path:
    return Path(__file__).parent / "configs"
