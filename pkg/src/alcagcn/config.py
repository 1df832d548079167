"""Run configuration: JSON file sections plus ``--set section.key=value`` overrides.

Precedence is flags > file > defaults. Unknown keys and ill-typed values are
collected and reported together with their key paths.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

from .encoder import DEFAULT_CHANNELS, DEFAULT_STRIDES, EncoderConfig
from .fewshot import TrainRunConfig
from .model import ModelConfig
from .skeleton import LABEL_PATTERN, TARGET_FRAMES
from .synthetic import MODERATE_DIFFICULTY


class ConfigValidationError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class DataSection:
    frames: int = TARGET_FRAMES
    eval_classes: list[int] | None = None   # None: every sixth class starting at the smallest label
    val_fraction: float = 0.1
    label_pattern: str = LABEL_PATTERN.pattern


@dataclass
class SynthSection:
    n_classes: int = 25
    n_per_class: int = 50
    difficulty: float = MODERATE_DIFFICULTY


@dataclass
class ModelSection:
    blocks: int = len(DEFAULT_CHANNELS)
    channels: list[int] = field(default_factory=lambda: list(DEFAULT_CHANNELS))
    strides: list[int] = field(default_factory=lambda: list(DEFAULT_STRIDES))
    kernel_groups: int = 1
    dropout: float = 0.5
    sampling_strategy: str = "both"
    division: str = "both"
    constraints: str = "full"
    d_emb: int = 256
    head_scale: float = 1.0
    skip_absent: bool = True


@dataclass
class TrainSection:
    mode: str = "episodic"
    epochs: int = 100
    episodes_per_epoch: int = 200
    n_way: int = 20
    queries_per_class: int = 1
    batch_size: int = 64
    patience: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-6
    val_episodes: int = 100


@dataclass
class EvalSection:
    include_references: bool = False
    dump_distances: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    threads: int | None = None
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- conversions -----------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    def model_config(self) -> ModelConfig:
        m = self.model
        enc = EncoderConfig(channels=tuple(m.channels), strides=tuple(m.strides), kernel_groups=m.kernel_groups,
                            sampling_strategy=m.sampling_strategy, dropout=m.dropout)
        return ModelConfig(encoder=enc, d_emb=m.d_emb, division=m.division, constraints=m.constraints,
                           head_scale=m.head_scale, skip_absent=m.skip_absent)

    def train_config(self) -> TrainRunConfig:
        t = self.train
        return TrainRunConfig(mode=t.mode, epochs=t.epochs, episodes_per_epoch=t.episodes_per_epoch, n_way=t.n_way,
                              queries_per_class=t.queries_per_class, batch_size=t.batch_size, patience=t.patience,
                              lr=t.lr, weight_decay=t.weight_decay, val_episodes=t.val_episodes,
                              val_fraction=self.data.val_fraction, seed=self.seed)

    def with_model(self, **changes) -> "RunConfig":
        return replace(self, model=replace(self.model, **changes))


_SECTIONS = {f.name: f for f in fields(RunConfig)}


def _coerce(value: Any, hint, path: str, problems: list[str]):
    """Check ``value`` against a (simple) type hint, converting ints to floats where expected."""
    origin, args = get_origin(hint), get_args(hint)
    if args and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = get_origin(hint), get_args(hint)
    if origin is list:
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list, got {value!r}")
            return value
        return [_coerce(v, args[0], f"{path}[{i}]", problems) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if hint is str and not isinstance(value, str):
        problems.append(f"{path}: expected a string, got {value!r}")
    return value


def _apply(cfg: RunConfig, tree: dict, problems: list[str], origin: str) -> None:
    top_hints = get_type_hints(RunConfig)
    for key, value in tree.items():
        if key not in _SECTIONS:
            problems.append(f"{key}: unknown key ({origin})")
            continue
        section = getattr(cfg, key)
        if not is_dataclass(section):
            setattr(cfg, key, _coerce(value, top_hints[key], key, problems))
            continue
        if not isinstance(value, dict):
            problems.append(f"{key}: expected an object of settings ({origin})")
            continue
        hints = get_type_hints(type(section))
        for sub, v in value.items():
            if sub not in hints:
                problems.append(f"{key}.{sub}: unknown key ({origin})")
                continue
            setattr(section, sub, _coerce(v, hints[sub], f"{key}.{sub}", problems))


def parse_override(text: str) -> dict:
    """``train.lr=3e-3`` -> ``{"train": {"lr": 0.003}}``; values are parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigValidationError([f"--set {text!r}: expected key=value"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    tree: dict = {}
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return tree


def validate(cfg: RunConfig) -> list[str]:
    problems = []
    m, t, d = cfg.model, cfg.train, cfg.data
    if m.blocks != len(m.channels):
        problems.append(f"model.blocks: {m.blocks} blocks but {len(m.channels)} channel widths")
    if len(m.strides) != len(m.channels):
        problems.append("model.strides: must have one stride per block")
    if any(s not in (1, 2) for s in m.strides):
        problems.append("model.strides: strides must be 1 or 2")
    if not 0 <= m.dropout < 1:
        problems.append("model.dropout: must lie in [0, 1)")
    for name, allowed in (("sampling_strategy", ("both", "skeleton_only", "part_only")),
                          ("division", ("both", "spatial_only", "temporal_only", "none")),
                          ("constraints", ("full", "no_adl", "no_global"))):
        if getattr(m, name) not in allowed:
            problems.append(f"model.{name}: {getattr(m, name)!r} not in {allowed}")
    if t.mode not in ("episodic", "traditional"):
        problems.append(f"train.mode: {t.mode!r} not in ('episodic', 'traditional')")
    for name in ("epochs", "patience", "episodes_per_epoch", "batch_size", "val_episodes", "queries_per_class"):
        if getattr(t, name) < 1:
            problems.append(f"train.{name}: must be >= 1")
    if t.n_way < 2:
        problems.append("train.n_way: must be >= 2")
    if t.lr <= 0:
        problems.append("train.lr: must be positive")
    if not 0 <= d.val_fraction < 1:
        problems.append("data.val_fraction: must lie in [0, 1)")
    if d.frames < 3:
        problems.append("data.frames: need at least 3 frames")
    if cfg.threads is not None and cfg.threads < 1:
        problems.append("threads: must be >= 1")
    if cfg.synth.n_classes < 2 or cfg.synth.n_per_class < 2:
        problems.append("synth: need at least 2 classes and 2 samples per class")
    if cfg.synth.difficulty < 0:
        problems.append("synth.difficulty: must be non-negative")
    return problems


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    cfg = RunConfig()
    problems: list[str] = []
    if path is not None:
        try:
            tree = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigValidationError([f"{path}: cannot read config ({exc})"]) from exc
        if not isinstance(tree, dict):
            raise ConfigValidationError([f"{path}: top level must be an object"])
        _apply(cfg, tree, problems, str(path))
    for text in overrides:
        _apply(cfg, parse_override(text), problems, f"--set {text}")
    if not problems:
        problems = validate(cfg)
    if problems:
        raise ConfigValidationError(problems)
    return cfg


def config_from_dict(tree: dict) -> RunConfig:
    """Rebuild a config that was echoed into an artifact."""
    cfg = RunConfig()
    problems: list[str] = []
    _apply(cfg, tree, problems, "embedded")
    if problems:
        raise ConfigValidationError(problems)
    return cfg


def default_eval_classes(labels) -> list[int]:
    """Every sixth class starting from the smallest label (A001, A007, ... A115 on NTU-120)."""
    classes = sorted(set(int(c) for c in labels))
    return classes[::6]
