"""
Experiment configuration documents.

A config is a JSON object with the sections ``dataset``, ``model``,
``train``, ``attack``, ``eval`` plus ``output_dir`` and ``seed``. Every
section is optional; missing keys take the defaults of the dataclasses
below, and unknown keys are rejected. See ``docs/config.md``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .attacks import AttackConfig
from .data import DEFAULT_CONTRAST, DEFAULT_NOISE
from .errors import ConfigError
from .models import ARCHITECTURES

CONFIG_SCHEMA_VERSION = 1


@dataclass
class DatasetSection:
    kind: str = "synthetic"  # "synthetic" or "idx"
    num_classes: int = 8
    per_class: int = 256
    image_size: int = 32
    channels: int = 3
    test_fraction: float = 0.25
    noise: float = DEFAULT_NOISE
    contrast: List[float] = field(default_factory=lambda: list(DEFAULT_CONTRAST))
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None


@dataclass
class TrainSpec:
    epochs: int = 10
    lr: float = 0.02
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    ema: Optional[float] = None


DEFAULT_TRAIN = {
    "vit": TrainSpec(epochs=56, lr=0.05, batch_size=32, grad_clip=1.0, ema=0.99),
    "cnn": TrainSpec(epochs=10, lr=0.03),
    "mlp": TrainSpec(epochs=40, lr=0.05, grad_clip=1.0),
}


@dataclass
class AttackSection:
    epsilon: float = 16.0
    alpha: Optional[float] = None
    iterations: int = 50
    method: str = "MIM"
    sapr_enabled: bool = False
    threshold: float = 0.0
    gate_mode: str = "uniform"
    decay: float = 1.0
    dim_prob: float = 0.5
    dim_min_ratio: float = 0.9
    sim_scales: int = 5
    use_sign: bool = True
    seed: Optional[int] = None  # defaults to the global seed
    num_images: int = 200
    chunk_size: int = 50
    debug: bool = False


@dataclass
class EvalSection:
    targets: Optional[List[str]] = None  # defaults to every non-white-box model
    p_grid: List[float] = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(19)])
    ms_ssim: bool = True
    export_images: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: Dict[str, dict] = field(default_factory=lambda: {"vit": {"arch": "vit"}, "cnn": {"arch": "cnn"},
                                                            "mlp": {"arch": "mlp"}})
    white_box: str = "vit"
    train: Dict[str, TrainSpec] = field(default_factory=dict)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs/default"
    seed: int = 0
    schema_version: int = CONFIG_SCHEMA_VERSION

    # -- derived ---------------------------------------------------------
    def model_spec(self, name: str):
        spec = dict(self.model[name])
        arch = spec.pop("arch")
        spec.setdefault("num_classes", self.dataset.num_classes)
        spec.setdefault("image_size", self.dataset.image_size)
        spec.setdefault("in_channels", self.dataset.channels)
        return arch, spec

    def train_spec(self, name: str) -> TrainSpec:
        if name in self.train:
            return self.train[name]
        arch = self.model[name]["arch"]
        return DEFAULT_TRAIN.get(arch, TrainSpec())

    @property
    def target_names(self) -> List[str]:
        if self.eval.targets is not None:
            return list(self.eval.targets)
        return [n for n in self.model if n != self.white_box]

    def attack_config(self, **overrides) -> AttackConfig:
        fields = {f.name for f in dataclasses.fields(AttackConfig)}
        values = {k: v for k, v in dataclasses.asdict(self.attack).items() if k in fields}
        if values["seed"] is None:
            values["seed"] = self.seed
        values.update(overrides)
        return AttackConfig(**values)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["train"] = {name: dataclasses.asdict(self.train_spec(name)) for name in self.model}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _strict(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _model_section(data) -> Dict[str, dict]:
    if not isinstance(data, dict) or not data:
        raise ConfigError("model: expected a non-empty object of named models")
    out = {}
    for name, spec in data.items():
        if not isinstance(spec, dict) or "arch" not in spec:
            raise ConfigError(f"model.{name}: needs an 'arch' field")
        arch = spec["arch"]
        if arch not in ARCHITECTURES:
            raise ConfigError(f"model.{name}: unknown arch {arch!r}")
        cfg_cls = ARCHITECTURES[arch][1]
        allowed = {f.name for f in dataclasses.fields(cfg_cls)} | {"arch"}
        unknown = sorted(set(spec) - allowed)
        if unknown:
            raise ConfigError(f"model.{name}: unknown keys {unknown}")
        out[name] = dict(spec)
    return out


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    cfg = ExperimentConfig(
        dataset=_strict(DatasetSection, data.get("dataset"), "dataset"),
        attack=_strict(AttackSection, data.get("attack"), "attack"),
        eval=_strict(EvalSection, data.get("eval"), "eval"),
        output_dir=str(data.get("output_dir", "runs/default")),
        seed=data.get("seed", 0),
        white_box=data.get("white_box", "vit"),
    )
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    if "model" in data:
        cfg.model = _model_section(data["model"])
    if cfg.white_box not in cfg.model or cfg.model[cfg.white_box]["arch"] != "vit":
        raise ConfigError(f"white_box {cfg.white_box!r} must name a model with arch 'vit'")
    train = data.get("train") or {}
    if not isinstance(train, dict):
        raise ConfigError("train: expected an object keyed by model name")
    for name, spec in train.items():
        if name not in cfg.model:
            raise ConfigError(f"train.{name}: no such model")
        cfg.train[name] = _strict(TrainSpec, spec, f"train.{name}")
    for name in cfg.target_names:
        if name not in cfg.model:
            raise ConfigError(f"eval.targets: no model named {name!r}")
    if cfg.dataset.kind not in ("synthetic", "idx"):
        raise ConfigError("dataset.kind must be 'synthetic' or 'idx'")
    if cfg.dataset.kind == "idx" and not (cfg.dataset.idx_images and cfg.dataset.idx_labels):
        raise ConfigError("dataset.kind 'idx' needs idx_images and idx_labels")
    if len(cfg.dataset.contrast) != 2:
        raise ConfigError("dataset.contrast must be a [low, high] pair")
    if not cfg.eval.p_grid:
        raise ConfigError("eval.p_grid must not be empty")
    cfg.attack_config()  # validates the attack section
    return cfg


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from None
    return parse_config(data)
