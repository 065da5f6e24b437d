"""Experiment configuration: one hierarchical document covering every stage.

A config file is TOML with sections [data], [data.generator], [encoder],
[heads], [objective], [optimizer], [cdnet], [pretrain], [finetune]. Every
key has a desk-scale default, unknown keys are rejected, and each run
writes the fully resolved document next to its outputs so a result can be
replayed from the snapshot alone.
"""

import json
from dataclasses import dataclass, field, fields, is_dataclass, asdict
from pathlib import Path
from typing import Any, Dict, Optional

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from . import augment
from .errors import ConfigInvalid
from .data import GeneratorConfig
from .nn import CDNetConfig, EncoderConfig, HeadConfig
from .objective import ObjectiveConfig
from .training import FinetuneSettings, OptimizerConfig, PretrainSettings


def _build(cls, section: str, raw: Dict[str, Any]):
    """Construct a dataclass from a mapping, rejecting unknown keys."""
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigInvalid(f"unknown keys in [{section}]: {', '.join(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        # TOML arrays arrive as lists; range fields are stored as tuples
        if isinstance(value, list) and f.name in ("building_count", "building_size"):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


@dataclass
class DataSection:
    root: str = "data/desk"
    name: str = "desk"
    scenes: int = 40
    patch: int = 64
    seed: int = 0
    fractions: Dict[str, float] = field(
        default_factory=lambda: {"train": 0.7, "val": 0.1, "test": 0.2})
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def validate(self) -> None:
        if self.scenes < 1:
            raise ConfigInvalid(f"scenes must be >= 1, got {self.scenes}")
        if self.patch < 8:
            raise ConfigInvalid(f"patch must be >= 8, got {self.patch}")
        self.generator.validate()


@dataclass
class OptimizerSection:
    base_lr: float = 0.01
    finetune_base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    poly_power: float = 0.9

    def pretrain_config(self) -> OptimizerConfig:
        return OptimizerConfig(base_lr=self.base_lr, momentum=self.momentum,
                               weight_decay=self.weight_decay, poly_power=self.poly_power)

    def finetune_config(self) -> OptimizerConfig:
        return OptimizerConfig(base_lr=self.finetune_base_lr, momentum=self.momentum,
                               weight_decay=self.weight_decay, poly_power=self.poly_power)


@dataclass
class CdnetSection:
    fpn_channels: int = 32


_SECTIONS = {
    "data": DataSection,
    "encoder": EncoderConfig,
    "heads": HeadConfig,
    "objective": ObjectiveConfig,
    "optimizer": OptimizerSection,
    "cdnet": CdnetSection,
    "pretrain": PretrainSettings,
    "finetune": FinetuneSettings,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    cdnet: CdnetSection = field(default_factory=CdnetSection)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        known = set(_SECTIONS) | {"seed"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigInvalid(f"unknown top-level keys: {', '.join(unknown)}")
        cfg = cls()
        if "seed" in raw:
            if not isinstance(raw["seed"], int):
                raise ConfigInvalid(f"seed must be an integer, got {raw['seed']!r}")
            cfg.seed = raw["seed"]
        for name, section_cls in _SECTIONS.items():
            if name not in raw:
                continue
            sub = raw[name]
            if not isinstance(sub, dict):
                raise ConfigInvalid(f"[{name}] must be a table")
            if name == "data":
                gen_raw = sub.pop("generator", None)
                section = _build(DataSection, "data",
                                 {k: v for k, v in sub.items() if k != "fractions"})
                if "fractions" in sub:
                    section.fractions = dict(sub["fractions"])
                if gen_raw is not None:
                    section.generator = _build(GeneratorConfig, "data.generator", gen_raw)
                setattr(cfg, name, section)
            else:
                setattr(cfg, name, _build(section_cls, name, sub))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigInvalid(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                raw = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigInvalid(f"config parse error in {path}: {exc}") from exc
        return cls.from_dict(raw)

    def validate(self) -> None:
        self.data.validate()
        self.objective.validate()
        self.pretrain.validate()
        self.finetune.validate()
        self.optimizer.pretrain_config().validate()
        self.optimizer.finetune_config().validate()
        if self.cdnet.fpn_channels < 1:
            raise ConfigInvalid(f"fpn_channels must be >= 1, got {self.cdnet.fpn_channels}")

    def cd_config(self) -> CDNetConfig:
        return CDNetConfig(encoder=self.encoder, fpn_channels=self.cdnet.fpn_channels)

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"seed": self.seed}
        for name in _SECTIONS:
            value = getattr(self, name)
            doc[name] = asdict(value) if is_dataclass(value) else value
        # fixed photometric ranges, recorded for replayability
        doc["augmentation"] = augment.constants()
        return doc

    def save_resolved(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "resolved_config.json"
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def apply_overrides(cfg: ExperimentConfig, *, seed: Optional[int] = None,
                    objective: Optional[str] = None, fraction: Optional[float] = None,
                    no_stopgrad: bool = False, scenes: Optional[int] = None,
                    size: Optional[int] = None, patch: Optional[int] = None) -> ExperimentConfig:
    """Fold command-line overrides into the config; flags win over file values."""
    if seed is not None:
        cfg.seed = seed
    if objective is not None:
        cfg.objective.mode = objective
    if fraction is not None:
        cfg.finetune.fraction = fraction
    if no_stopgrad:
        cfg.objective.use_stop_gradient = False
    if scenes is not None:
        cfg.data.scenes = scenes
    if size is not None:
        cfg.data.generator.size = size
    if patch is not None:
        cfg.data.patch = patch
    cfg.validate()
    return cfg
