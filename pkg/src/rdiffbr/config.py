"""Run configuration: a YAML tree validated into frozen dataclasses.

Precedence: built-in defaults < config file < command-line overrides
(``--set section.key=value``).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields

import yaml

from .data import SynthConfig, validate_rho
from .diffusion import ALLOWED_DEPTHS, INFER_SOURCE_EMBEDDING, TRAIN_NOISY_INPUT


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"
    ratios: tuple = (0.7, 0.1, 0.2)
    synthetic: SynthConfig = field(default_factory=SynthConfig)


@dataclass(frozen=True)
class BackboneSection:
    D: int = 32
    scale: float = 0.1
    l2_reg: float = 1e-4


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 50
    s: float = 0.1
    alpha_min: float = 0.1
    alpha_max: float = 0.9


@dataclass(frozen=True)
class ApproximatorSection:
    delta: float
    depth: int = 2
    hidden_size: int = 64
    d: int = 16
    anchor_policy: str = TRAIN_NOISY_INPUT


@dataclass(frozen=True)
class TrainingSection:
    lam: float = 1.0
    lr: float = 0.001
    epochs: int = 50
    batch_size: int = 64
    T_prime: int = 20
    seed: int = 0
    detach: bool = False
    deterministic_noise: bool = False
    learn_delta: bool = False


@dataclass(frozen=True)
class EvalSection:
    Ks: tuple = (20,)
    rhos: tuple = (-4, -3, -2, -1, 0, 1, 2, 3, 4, 5)
    n_seeds: int = 1


@dataclass(frozen=True)
class OutputSection:
    directory: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection
    backbone: BackboneSection
    schedule: ScheduleSection
    approximator: ApproximatorSection
    training: TrainingSection
    eval: EvalSection
    output: OutputSection

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["ratios"] = list(self.dataset.ratios)
        d["dataset"]["synthetic"]["ratios"] = list(self.dataset.synthetic.ratios)
        d["eval"]["Ks"] = list(self.eval.Ks)
        d["eval"]["rhos"] = list(self.eval.rhos)
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:10]

    def replace(self, **dotted) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"training.lam": 2.0})``."""
        tree = self.to_dict()
        for path, value in dotted.items():
            set_path(tree, path, value)
        return config_from_dict(tree)


_SECTIONS = {
    "dataset": DatasetSection, "backbone": BackboneSection, "schedule": ScheduleSection,
    "approximator": ApproximatorSection, "training": TrainingSection, "eval": EvalSection,
    "output": OutputSection,
}


def set_path(tree: dict, path: str, value) -> None:
    keys = path.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(path, "cannot descend into a scalar")
    node[keys[-1]] = value


def _coerce(path, value, kind):
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind is int:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError(value)
            return int(float(value))
        if kind is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if kind is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected {kind.__name__}, got {value!r}") from None
    return value


def _build(cls, raw, prefix):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"{prefix}.{sorted(unknown)[0]}", "unknown key")
    kwargs = {}
    for name, f in known.items():
        path = f"{prefix}.{name}"
        if name not in raw:
            if f.default is MISSING and f.default_factory is MISSING:
                raise ConfigError(path, "required field is missing")
            continue
        value = raw[name]
        if name == "synthetic":
            kwargs[name] = _build_synth(value, path)
        elif isinstance(f.default, tuple):
            if isinstance(value, (int, float, str)):
                value = [value]
            elem = float if name == "ratios" else int
            kwargs[name] = tuple(_coerce(path, v, elem) for v in value)
        else:
            kind = {"int": int, "float": float, "bool": bool, "str": str}.get(f.type, None)
            kwargs[name] = _coerce(path, value, kind) if kind else value
    return cls(**kwargs)


def _build_synth(raw, prefix) -> SynthConfig:
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "expected a mapping")
    known = {f.name: f for f in fields(SynthConfig)}
    kwargs = {}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"{prefix}.{k}", "unknown key")
        default = known[k].default
        if isinstance(default, tuple):
            kwargs[k] = tuple(_coerce(f"{prefix}.{k}", x, float) for x in v)
        elif isinstance(default, bool):
            kwargs[k] = _coerce(f"{prefix}.{k}", v, bool)
        elif isinstance(default, int):
            kwargs[k] = _coerce(f"{prefix}.{k}", v, int)
        else:
            kwargs[k] = _coerce(f"{prefix}.{k}", v, float)
    cfg = SynthConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(prefix, str(exc)) from None
    return cfg


def config_from_dict(tree: dict) -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = set(tree) - set(_SECTIONS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    sections = {name: _build(cls, tree.get(name), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(**sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    ds, bb, sc, ap, tr, ev = (cfg.dataset, cfg.backbone, cfg.schedule, cfg.approximator,
                              cfg.training, cfg.eval)
    checks = [
        ("dataset.ratios", len(ds.ratios) == 3 and all(r >= 0 for r in ds.ratios)
         and abs(sum(ds.ratios) - 1) <= 1e-9 and ds.ratios[0] > 0,
         "three non-negative fractions summing to 1"),
        ("backbone.D", bb.D >= 1, "must be >= 1"),
        ("backbone.scale", bb.scale > 0, "must be > 0"),
        ("backbone.l2_reg", bb.l2_reg >= 0, "must be >= 0"),
        ("schedule.T", 1 <= sc.T <= 200, "must lie in [1, 200]"),
        ("schedule.s", 0 < sc.s < 1, "must lie in (0, 1)"),
        ("schedule.alpha_min", 0 < sc.alpha_min < 1, "must lie in (0, 1)"),
        ("schedule.alpha_max", sc.alpha_min < sc.alpha_max < 1, "must lie in (alpha_min, 1)"),
        ("approximator.delta", 0 < ap.delta <= 1, "must lie in (0, 1]"),
        ("approximator.depth", ap.depth in ALLOWED_DEPTHS, f"must be one of {ALLOWED_DEPTHS}"),
        ("approximator.hidden_size", 8 <= ap.hidden_size <= 4096, "must lie in [8, 4096]"),
        ("approximator.d", ap.d >= 2 and ap.d % 2 == 0, "must be an even integer >= 2"),
        ("approximator.anchor_policy", ap.anchor_policy in (TRAIN_NOISY_INPUT, INFER_SOURCE_EMBEDDING),
         "unknown anchor policy"),
        ("training.lam", 0 < tr.lam < 5, "must lie in (0, 5)"),
        ("training.lr", tr.lr > 0, "must be > 0"),
        ("training.epochs", tr.epochs >= 1, "must be >= 1"),
        ("training.batch_size", tr.batch_size >= 1, "must be >= 1"),
        ("training.T_prime", 1 <= tr.T_prime <= min(sc.T, 200), "must lie in [1, schedule.T]"),
        ("eval.Ks", len(ev.Ks) > 0 and all(k >= 1 for k in ev.Ks), "positive cutoffs required"),
        ("eval.rhos", len(ev.rhos) > 0, "at least one rho required"),
        ("eval.n_seeds", ev.n_seeds >= 1, "must be >= 1"),
    ]
    for path, ok, msg in checks:
        if not ok:
            raise ConfigError(path, msg)
    if ds.source != "synthetic" and not ds.source:
        raise ConfigError("dataset.source", "must be 'synthetic' or a directory path")
    for r in ev.rhos:
        try:
            validate_rho(r)
        except ValueError as exc:
            raise ConfigError("eval.rhos", str(exc)) from None


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            tree = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
    tree = copy.deepcopy(tree)
    for k, v in (overrides or {}).items():
        set_path(tree, k, v)
    return config_from_dict(tree)


def parse_override(text: str) -> tuple[str, object]:
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)
