"""Experiment configuration: ``key = value`` text with ``[section]`` headers and ``#`` comments."""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

METHODS = ("ours", "hallucination", "knn_transfer", "prototypical", "no_augmentation")


@dataclass
class ExperimentSection:
    methods: tuple[str, ...] = ("ours", "hallucination", "prototypical", "no_augmentation")
    shots: tuple[int, ...] = (1, 5)
    seeds: tuple[int, ...] = tuple(range(10))
    n_sup: int = 0  # 0: true superclass count for synthetic data
    balanced: bool = True
    use_regressor: bool = True
    base_only_tree: bool = False
    n_aug: int = 20
    classes_per_episode: int = 5
    query_per_class: int = 15
    episodes: int = 200
    knn_k: int = 5
    standardize: bool = True
    output_dir: str = "results"
    record_timing: bool = False
    save_models: bool = True
    emit_projection: bool = True
    emit_figures: bool = True


@dataclass
class SyntheticSection:
    dim: int = 16
    n_superclasses: int = 8
    classes_per_superclass: int = 5
    superclass_scale: float = 6.0
    class_scale: float = 1.5
    deviation: float = 2.0
    anisotropy_global: float = 0.5
    anisotropy_superclass: float = 1.5
    n_few_classes: int = 10
    many_shots: int = 200
    heldout_per_class: int = 100
    pareto_alpha: float = 0.0  # 0 disables the long-tailed shot counts
    min_shots: int = 1


@dataclass
class DataSection:
    embeddings: str = ""
    split: str = ""
    test_embeddings: str = ""


@dataclass
class OptimizerSection:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    factor: float = 0.2
    milestones: tuple[float, ...] = (0.5, 0.8)


@dataclass
class RegressorSection:
    epochs: int = 60
    batch_size: int = 64
    hidden_mult: int = 2
    slope: float = 0.1


@dataclass
class GeneratorSection:
    noise_dim: int = 8
    hidden_mult: int = 4
    slope: float = 0.1


@dataclass
class MetaSection:
    iterations: int = 0  # 0 resolves to 2000 (synthetic) or 60000 (embeddings)
    inner_steps: int = 8
    inner_lr: float = 0.01
    inner_momentum: float = 0.0
    inner_weight_decay: float = 0.0
    outer_lr: float = 0.003
    grad_clip: float = 1.0
    query_per_class: int = 15
    first_order: bool = False


@dataclass
class EvaluationSection:
    inner_steps: int = 300


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    synthetic: SyntheticSection | None = None
    data: DataSection | None = None
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    regressor: RegressorSection = field(default_factory=RegressorSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    meta: MetaSection = field(default_factory=MetaSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def validate(self) -> "ExperimentConfig":
        e = self.experiment
        bad = [m for m in e.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s): {', '.join(bad)}")
        if not e.seeds:
            raise ConfigError("seeds must not be empty")
        if not e.shots or min(e.shots) < 1:
            raise ConfigError("shots must be a non-empty list of positive integers")
        if e.n_aug < max(e.shots):
            raise ConfigError("n_aug must be at least the largest shot count")
        if self.synthetic is None and self.data is None:
            self.synthetic = SyntheticSection()
        if self.synthetic is not None and self.data is not None:
            raise ConfigError("configure exactly one of [synthetic] or [data]")
        if self.data is not None:
            if not (self.data.embeddings and self.data.split and self.data.test_embeddings):
                raise ConfigError("[data] needs embeddings, split and test_embeddings")
            if e.n_sup < 1:
                raise ConfigError("n_sup is required for embedding data")
        if self.synthetic is not None and self.synthetic.heldout_per_class < e.query_per_class:
            raise ConfigError("heldout_per_class must cover query_per_class")
        if self.meta.iterations == 0:
            self.meta.iterations = 2000 if self.synthetic is not None else 60000
        if self.meta.iterations < 0:
            raise ConfigError("meta.iterations must be non-negative")
        if self.meta.outer_lr < 0 or self.meta.grad_clip < 0:
            raise ConfigError("meta.outer_lr and meta.grad_clip must be non-negative")
        if self.meta.inner_steps < 1:
            raise ConfigError("meta.inner_steps must be >= 1")
        if "knn_transfer" in e.methods and e.knn_k < 1:
            raise ConfigError("knn_k must be positive")
        return self

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if val is not None:
                out[f.name] = {k: (list(v) if isinstance(v, tuple) else v)
                               for k, v in dataclasses.asdict(val).items()}
        return out


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_ROOT = "experiment"


def _section_type(name: str) -> type:
    hint = typing.get_type_hints(ExperimentConfig)[name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return args[0] if args else hint


def _convert(raw: str, hint: Any, where: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            (item,) = {a for a in typing.get_args(hint) if a is not Ellipsis}
            parts = [p for p in raw.replace(",", " ").split() if p]
            if item is int and len(parts) == 1 and ".." in parts[0]:
                lo, hi = parts[0].split("..")
                return tuple(range(int(lo), int(hi) + 1))
            return tuple(_convert(p, item, where) for p in parts)
        if hint is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def parse_config(text: str, base_dir: str | Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), default_section="__defaults__")
    parser.optionxform = str  # keys are case-sensitive
    first = next((ln.strip() for ln in text.splitlines()
                  if ln.strip() and not ln.strip().startswith("#")), "")
    body = text if first.startswith("[") else f"[{_ROOT}]\n{text}"
    try:
        parser.read_string(body)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig()
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = _section_type(name)
        hints = typing.get_type_hints(cls)
        current = getattr(cfg, name) or cls()
        values = {}
        for key, raw in parser.items(name):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            values[key] = _convert(raw, hints[key], f"[{name}] {key}")
        setattr(cfg, name, dataclasses.replace(current, **values))
    if cfg.data is not None and base_dir is not None:
        base = Path(base_dir)
        for key in ("embeddings", "split", "test_embeddings"):
            val = getattr(cfg.data, key)
            if val and not Path(val).is_absolute():
                setattr(cfg.data, key, str(base / val))
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.parent)
