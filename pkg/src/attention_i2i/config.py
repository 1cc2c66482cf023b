"""Run configuration: one JSON file with ``data``, ``model``, ``train``, ``local_global`` and ``eval`` sections.

Every key has a default; unknown sections or keys are rejected. A CLI override
``--set section.key=value`` parses ``value`` as JSON when possible.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ._validation import ConfigurationError
from .data import AugmentationConfig
from .local_global import LocalGlobalConfig
from .metrics import FeatureExtractorSpec
from .networks import GeneratorConfig
from .trainer import TrainConfig, json_ready


@dataclass
class DataConfig:
    root: str | None = None
    image_size: int = 64
    num_images: int = 200
    num_test: int = 50


@dataclass
class EvalConfig:
    split: str = "test"
    feature_dim: int = 256
    feature_seed: int = 0
    kid_subset_size: int = 100
    kid_num_subsets: int = 100
    iou_threshold: float = 0.5
    sample_count: int = 1000
    num_panels: int = 5

    def extractor(self) -> FeatureExtractorSpec:
        return FeatureExtractorSpec("fixed_random_conv", self.feature_dim, self.feature_seed)


SECTIONS = {
    "data": DataConfig,
    "model": GeneratorConfig,
    "train": TrainConfig,
    "local_global": LocalGlobalConfig,
    "eval": EvalConfig,
}


def _build(cls, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    values = dict(values)
    if cls is LocalGlobalConfig:
        if "stage_weights" in values:
            values["stage_weights"] = tuple(values["stage_weights"])
        if isinstance(values.get("augment"), dict):
            aug = dict(values["augment"])
            for k in ("blur_sigma_range", "jitter_strengths"):
                if k in aug:
                    aug[k] = tuple(aug[k])
            values["augment"] = _build(AugmentationConfig, aug, "local_global.augment")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in [{section}]: {exc}") from exc


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    local_global: LocalGlobalConfig = field(default_factory=LocalGlobalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {sorted(unknown)}")
        return cls(**{name: _build(kind, raw.get(name, {}), name) for name, kind in SECTIONS.items()})

    def to_dict(self) -> dict:
        return {name: json_ready(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must hold a JSON object")
        return cls.from_dict(raw)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def override(self, assignments: list[str]) -> "RunConfig":
        raw = self.to_dict()
        for item in assignments:
            key, sep, value = item.partition("=")
            section, _, name = key.partition(".")
            if not sep or not name:
                raise ConfigurationError(f"override must look like section.key=value, got {item!r}")
            if section not in raw:
                raise ConfigurationError(f"unknown config section {section!r}")
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            target = raw[section]
            *parents, leaf = name.split(".")
            for p in parents:
                target = target.setdefault(p, {})
            target[leaf] = parsed
        return RunConfig.from_dict(raw)
